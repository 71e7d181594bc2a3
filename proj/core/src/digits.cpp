#include "bcnn/digits.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "bcnn/mnist_idx.hpp"

namespace bcnn {

namespace {

struct P {
  double x, y;
};

using Stroke = std::vector<P>;

// point = (cx + rx cos a, cy + ry sin a); y grows downward, so a=90 deg is
// the glyph bottom and a=270 deg the top.
Stroke arc(double cx, double cy, double rx, double ry, double a0_deg, double a1_deg,
           int segments = 24) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    double a = (a0_deg + (a1_deg - a0_deg) * i / segments) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return s;
}

// Glyphs over the unit box, y down.
std::vector<Stroke> glyph(int digit) {
  switch (digit) {
    case 0:
      return {arc(0.5, 0.5, 0.26, 0.37, 0, 360)};
    case 1:
      return {{{0.36, 0.26}, {0.56, 0.12}, {0.56, 0.88}}};
    case 2: {
      Stroke top = arc(0.5, 0.32, 0.22, 0.2, 180, 368);
      top.push_back({0.3, 0.86});
      top.push_back({0.72, 0.86});
      return {top};
    }
    case 3:
      return {arc(0.45, 0.3, 0.24, 0.19, 210, 480), arc(0.45, 0.68, 0.26, 0.21, 250, 520)};
    case 4:
      return {{{0.62, 0.12}, {0.3, 0.58}, {0.76, 0.58}}, {{0.62, 0.3}, {0.62, 0.9}}};
    case 5: {
      Stroke s{{0.7, 0.12}, {0.35, 0.12}, {0.32, 0.45}};
      for (P p : arc(0.47, 0.66, 0.25, 0.22, 250, 150 + 360)) s.push_back(p);
      return {s};
    }
    case 6: {
      Stroke descender{{0.66, 0.12}, {0.5, 0.22}, {0.37, 0.42}, {0.31, 0.62}};
      return {descender, arc(0.5, 0.68, 0.2, 0.19, 0, 360)};
    }
    case 7:
      return {{{0.28, 0.14}, {0.72, 0.14}, {0.44, 0.88}}};
    case 8:
      return {arc(0.5, 0.3, 0.19, 0.17, 0, 360), arc(0.5, 0.68, 0.23, 0.2, 0, 360)};
    case 9: {
      Stroke tail{{0.7, 0.34}, {0.68, 0.6}, {0.58, 0.88}};
      return {arc(0.51, 0.32, 0.2, 0.19, 0, 360), tail};
    }
    default:
      throw ContractError(strfmt("render_digit: digit %d out of range", digit));
  }
}

double point_segment_dist(double px, double py, P a, P b) {
  double dx = b.x - a.x, dy = b.y - a.y;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0;
  t = std::clamp(t, 0.0, 1.0);
  double qx = a.x + t * dx - px, qy = a.y + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

}  // namespace

std::vector<std::uint8_t> render_digit(int digit, RngStream& rng) {
  std::vector<Stroke> strokes = glyph(digit);

  // Affine jitter about the glyph center.
  const double rot = rng.uniform(-0.18, 0.18);
  const double shear = rng.uniform(-0.15, 0.15);
  const double sx = rng.uniform(0.78, 1.05) * rng.uniform(0.94, 1.06);
  const double sy = rng.uniform(0.78, 1.05) * rng.uniform(0.94, 1.06);
  const double tx = rng.uniform(-0.05, 0.05);
  const double ty = rng.uniform(-0.05, 0.05);
  const double cr = std::cos(rot), sr = std::sin(rot);
  auto map = [&](P p) {
    double x = (p.x - 0.5) * sx, y = (p.y - 0.5) * sy;
    x += shear * y;
    double xr = cr * x - sr * y, yr = sr * x + cr * y;
    // unit box to a 20px box centered in the 28px frame
    return P{(xr + 0.5 + tx) * 20.0 + 4.0, (yr + 0.5 + ty) * 20.0 + 4.0};
  };
  for (Stroke& s : strokes)
    for (P& p : s) p = map(p);

  const double width = rng.uniform(0.9, 1.6);   // stroke half-width, pixels
  const double ink = rng.uniform(0.82, 1.0);
  const double edge = 0.45;                     // falloff scale, pixels

  std::vector<std::uint8_t> out(28 * 28, 0);
  for (int py = 0; py < 28; ++py)
    for (int px = 0; px < 28; ++px) {
      double d = 1e9;
      for (const Stroke& s : strokes)
        for (size_t i = 0; i + 1 < s.size(); ++i)
          d = std::min(d, point_segment_dist(px + 0.5, py + 0.5, s[i], s[i + 1]));
      double v = ink / (1.0 + std::exp((d - width) / edge));
      v += rng.uniform(-0.02, 0.02);
      out[static_cast<size_t>(py * 28 + px)] =
          static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
    }
  return out;
}

void write_digit_idx(const std::string& images_path, const std::string& labels_path, Index count,
                     std::uint64_t seed) {
  std::vector<std::uint8_t> pixels;
  pixels.reserve(static_cast<size_t>(count) * 28 * 28);
  std::vector<std::uint8_t> labels(static_cast<size_t>(count));
  for (Index i = 0; i < count; ++i) {
    RngStream rng = RngStream::derive(seed, {rng_tag::kDataGen, static_cast<std::uint64_t>(i)});
    int digit = static_cast<int>(i % 10);
    labels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(digit);
    std::vector<std::uint8_t> img = render_digit(digit, rng);
    pixels.insert(pixels.end(), img.begin(), img.end());
  }
  write_idx_images(images_path, pixels, count, 28, 28);
  write_idx_labels(labels_path, labels);
}

}  // namespace bcnn
