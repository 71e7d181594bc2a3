#include "bcnn/plot.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "bcnn/csvio.hpp"
#include "bcnn/errors.hpp"

namespace bcnn {

namespace fs = std::filesystem;

namespace {

constexpr double kW = 640, kH = 400;
constexpr double kL = 60, kR = 20, kT = 30, kB = 40;  // margins
const char* kTpColor = "#4878cf";
const char* kOtherColor = "#ee854a";
const char* kSeriesColors[] = {"#4878cf", "#ee854a", "#6acc65", "#d65f5f",
                               "#956cb4", "#8c613c", "#dc7ec0", "#797979"};

struct Svg {
  std::string body;

  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0) {
    body += strfmt(
        "<rect x=\"%s\" y=\"%s\" width=\"%s\" height=\"%s\" fill=\"%s\" opacity=\"%s\"/>\n",
        csv::num(x).c_str(), csv::num(y).c_str(), csv::num(w).c_str(), csv::num(h).c_str(),
        fill.c_str(), csv::num(opacity).c_str());
  }
  void line(double x1, double y1, double x2, double y2, const std::string& stroke) {
    body += strfmt(
        "<line x1=\"%s\" y1=\"%s\" x2=\"%s\" y2=\"%s\" stroke=\"%s\" stroke-width=\"1\"/>\n",
        csv::num(x1).c_str(), csv::num(y1).c_str(), csv::num(x2).c_str(), csv::num(y2).c_str(),
        stroke.c_str());
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : pts) body += csv::num(x) + "," + csv::num(y) + " ";
    body += "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11,
            const std::string& anchor = "start") {
    body += strfmt("<text x=\"%s\" y=\"%s\" font-size=\"%d\" font-family=\"sans-serif\" "
                   "text-anchor=\"%s\">%s</text>\n",
                   csv::num(x).c_str(), csv::num(y).c_str(), size, anchor.c_str(), s.c_str());
  }
  void save(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write plot " + path);
    out << strfmt("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
                  "viewBox=\"0 0 %g %g\">\n",
                  kW, kH, kW, kH)
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body << "</svg>\n";
  }
};

void plot_histogram_1d(const csv::Table& t, const std::string& title, const std::string& path) {
  const size_t bins = t.rows.size();
  double max_count = 1;
  for (size_t r = 0; r < bins; ++r)
    max_count = std::max({max_count, t.value(r, "tp"),
                          t.value(r, t.column("fn") >= 0 ? "fn" : "fp")});
  Svg svg;
  svg.text(kW / 2, 18, title, 13, "middle");
  const std::string other_name = t.column("fn") >= 0 ? "fn" : "fp";
  const double plot_w = kW - kL - kR, plot_h = kH - kT - kB;
  const double bw = plot_w / double(bins);
  for (size_t r = 0; r < bins; ++r) {
    double tp = t.value(r, "tp");
    double other = t.value(r, other_name);
    double x = kL + double(r) * bw;
    double h1 = plot_h * tp / max_count;
    double h2 = plot_h * other / max_count;
    svg.rect(x + 1, kT + plot_h - h1, bw / 2 - 1, h1, kTpColor);
    svg.rect(x + bw / 2, kT + plot_h - h2, bw / 2 - 1, h2, kOtherColor);
  }
  svg.line(kL, kT + plot_h, kW - kR, kT + plot_h, "#333");
  svg.line(kL, kT, kL, kT + plot_h, "#333");
  svg.text(kL, kH - 8, t.header[0].substr(7));  // strip "bin_lo_"
  svg.text(kL - 6, kT + 10, csv::num(max_count), 10, "end");
  svg.text(kW - kR - 120, kT + 14, "tp", 11);
  svg.rect(kW - kR - 140, kT + 5, 12, 10, kTpColor);
  svg.text(kW - kR - 50, kT + 14, other_name, 11);
  svg.rect(kW - kR - 70, kT + 5, 12, 10, kOtherColor);
  svg.save(path);
}

void plot_histogram_2d(const csv::Table& t, const std::string& title, const std::string& path) {
  std::set<std::string> e0, e1;
  for (const auto& row : t.rows) {
    e0.insert(row[0]);
    e1.insert(row[1]);
  }
  std::vector<std::string> ax0(e0.begin(), e0.end()), ax1(e1.begin(), e1.end());
  auto num_sort = [](std::vector<std::string>& v) {
    std::sort(v.begin(), v.end(),
              [](const std::string& a, const std::string& b) { return std::stod(a) < std::stod(b); });
  };
  num_sort(ax0);
  num_sort(ax1);
  std::map<std::string, size_t> i0, i1;
  for (size_t i = 0; i < ax0.size(); ++i) i0[ax0[i]] = i;
  for (size_t i = 0; i < ax1.size(); ++i) i1[ax1[i]] = i;

  double max_count = 1;
  const std::string other_name = t.column("fn") >= 0 ? "fn" : "fp";
  for (size_t r = 0; r < t.rows.size(); ++r)
    max_count = std::max({max_count, t.value(r, "tp"), t.value(r, other_name)});

  Svg svg;
  svg.text(kW / 2, 18, title, 13, "middle");
  const double panel_w = (kW - kL - kR - 30) / 2;
  const double plot_h = kH - kT - kB;
  const double cw0 = panel_w / double(ax0.size());
  const double ch = plot_h / double(ax1.size());
  for (size_t r = 0; r < t.rows.size(); ++r) {
    size_t bx = i0[t.rows[r][0]], by = i1[t.rows[r][1]];
    double tp = t.value(r, "tp"), other = t.value(r, other_name);
    svg.rect(kL + double(bx) * cw0, kT + plot_h - double(by + 1) * ch, cw0, ch, kTpColor,
             tp / max_count);
    svg.rect(kL + panel_w + 30 + double(bx) * cw0, kT + plot_h - double(by + 1) * ch, cw0, ch,
             kOtherColor, other / max_count);
  }
  svg.text(kL + panel_w / 2, kH - 8, "tp: " + t.header[0].substr(7) + " x " +
                                          t.header[1].substr(7), 11, "middle");
  svg.text(kL + panel_w + 30 + panel_w / 2, kH - 8, other_name, 11, "middle");
  svg.save(path);
}

void plot_curves(const std::string& curve_csv, const std::string& out_dir,
                 std::vector<std::string>& written) {
  csv::Table t = csv::read(curve_csv);
  if (t.rows.empty()) throw IoError("curve csv has no rows: " + curve_csv);
  std::vector<std::string> values;
  for (const auto& row : t.rows)
    if (std::find(values.begin(), values.end(), row[0]) == values.end())
      values.push_back(row[0]);

  for (const std::string& metric :
       {std::string("bc_score"), std::string("bc_entropy"), std::string("bc_combined"),
        std::string("map"), std::string("accuracy_or_miou")}) {
    if (t.column(metric) < 0) continue;
    double lo = 1e300, hi = -1e300, emax = 1;
    for (size_t r = 0; r < t.rows.size(); ++r) {
      lo = std::min(lo, t.value(r, metric));
      hi = std::max(hi, t.value(r, metric));
      emax = std::max(emax, t.value(r, "epoch"));
    }
    if (hi <= lo) hi = lo + 1;
    Svg svg;
    svg.text(kW / 2, 18, metric, 13, "middle");
    const double plot_w = kW - kL - kR, plot_h = kH - kT - kB;
    for (size_t vi = 0; vi < values.size(); ++vi) {
      std::vector<std::pair<double, double>> pts;
      for (size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r][0] != values[vi]) continue;
        double x = kL + plot_w * t.value(r, "epoch") / emax;
        double y = kT + plot_h * (1.0 - (t.value(r, metric) - lo) / (hi - lo));
        pts.emplace_back(x, y);
      }
      const char* color = kSeriesColors[vi % 8];
      if (pts.size() == 1)
        svg.rect(pts[0].first - 2, pts[0].second - 2, 4, 4, color);
      else
        svg.polyline(pts, color);
      svg.rect(kW - kR - 110, kT + 6 + 14 * double(vi), 10, 10, color);
      svg.text(kW - kR - 95, kT + 15 + 14 * double(vi), values[vi], 11);
    }
    svg.line(kL, kT + plot_h, kW - kR, kT + plot_h, "#333");
    svg.line(kL, kT, kL, kT + plot_h, "#333");
    svg.text(kL - 6, kT + 10, csv::num(hi), 10, "end");
    svg.text(kL - 6, kT + plot_h, csv::num(lo), 10, "end");
    svg.text(kW / 2, kH - 8, "epoch", 11, "middle");
    std::string path = out_dir + "/curve_" + metric + ".svg";
    svg.save(path);
    written.push_back(path);
  }
}

}  // namespace

std::vector<std::string> export_plots(const std::vector<std::string>& run_dirs,
                                      const std::string& kind) {
  if (kind != "histograms" && kind != "curves")
    throw ConfigError(strfmt("export_plots: unknown kind '%s'", kind.c_str()));
  std::vector<std::string> written;
  for (const std::string& dir : run_dirs) {
    if (kind == "histograms") {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.rfind("hist_", 0) == 0 && e.path().extension() == ".csv")
          files.push_back(e.path().string());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw IoError("no histogram CSVs in " + dir);
      for (const std::string& f : files) {
        csv::Table t = csv::read(f);
        std::string out = f.substr(0, f.size() - 4) + ".svg";
        std::string title = fs::path(f).stem().string();
        bool two_axes = t.header.size() >= 2 && t.header[1].rfind("bin_lo_", 0) == 0;
        if (two_axes)
          plot_histogram_2d(t, title, out);
        else
          plot_histogram_1d(t, title, out);
        written.push_back(out);
      }
    } else {
      plot_curves(dir + "/curve.csv", dir, written);
    }
  }
  return written;
}

}  // namespace bcnn
