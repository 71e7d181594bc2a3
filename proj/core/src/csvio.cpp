#include "bcnn/csvio.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bcnn/errors.hpp"

namespace bcnn::csv {

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw IoError("csv: number formatting failed");
  return std::string(buf, end);
}

static std::string quote_cell(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ",";
    out += quote_cell(cells[i]);
  }
  return out;
}

void append_row(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::string>& cells) {
  bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("csv: cannot open " + path);
  if (fresh) out << join(header) << "\n";
  out << join(cells) << "\n";
}

int Table::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

double Table::value(size_t row, const std::string& name) const {
  int c = column(name);
  if (c < 0) throw IoError("csv: no column " + name);
  return std::stod(rows.at(row).at(static_cast<size_t>(c)));
}

Table read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open " + path);
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size()) {
        cells.push_back(std::move(cell));
        break;
      }
      char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cell += c;
        }
      } else if (c == '"' && cell.empty()) {
        quoted = true;
      } else if (c == ',') {
        cells.push_back(std::move(cell));
        cell.clear();
      } else {
        cell += c;
      }
    }
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

}  // namespace bcnn::csv
