#pragma once

#include <string>
#include <vector>

namespace bcnn::csv {

// Shortest representation that round-trips a double; used for every CSV cell
// so identical runs produce byte-identical files.
std::string num(double v);

std::string join(const std::vector<std::string>& cells);

// Appends a row; writes the header first when the file does not exist yet.
void append_row(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::string>& cells);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
  double value(size_t row, const std::string& name) const;
};

Table read(const std::string& path);

}  // namespace bcnn::csv
