#pragma once

#include <string>
#include <vector>

namespace bcnn {

// Renders the CSV outputs of finished runs as SVG files, written next to
// their sources. kind "histograms" plots every hist_*.csv in each directory;
// kind "curves" plots each metric column of curve.csv with one series per
// sweep value. Pure function of the CSV contents; assertions belong on the
// CSVs, the plots are presentational.
std::vector<std::string> export_plots(const std::vector<std::string>& run_dirs,
                                      const std::string& kind);

}  // namespace bcnn
