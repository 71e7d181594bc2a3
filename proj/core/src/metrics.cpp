#include "bcnn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bcnn/dataset.hpp"

namespace bcnn {

IoUResult iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
              std::span<const std::uint8_t> mask, Index num_classes) {
  if (pred.size() != gt.size())
    throw ShapeError(strfmt("iou: %zu predictions vs %zu labels", pred.size(), gt.size()));
  if (!mask.empty() && mask.size() != gt.size())
    throw ShapeError("iou: mask length mismatch");

  std::vector<long long> tp(static_cast<size_t>(num_classes), 0);
  std::vector<long long> fp(static_cast<size_t>(num_classes), 0);
  std::vector<long long> fn(static_cast<size_t>(num_classes), 0);
  size_t used = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (gt[i] == kIgnoreLabel) continue;
    ++used;
    std::int32_t p = pred[i], g = gt[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
      throw ContractError(strfmt("iou: label out of range at element %zu", i));
    if (p == g) {
      ++tp[static_cast<size_t>(p)];
    } else {
      ++fp[static_cast<size_t>(p)];
      ++fn[static_cast<size_t>(g)];
    }
  }
  if (used == 0) throw ContractError("iou: mask excludes every element");

  IoUResult out;
  out.per_class.assign(static_cast<size_t>(num_classes), 0.0);
  out.present.assign(static_cast<size_t>(num_classes), false);
  double sum = 0;
  Index present_count = 0;
  for (Index c = 0; c < num_classes; ++c) {
    size_t ci = static_cast<size_t>(c);
    long long denom = tp[ci] + fp[ci] + fn[ci];
    if (denom == 0) continue;
    out.present[ci] = true;
    out.per_class[ci] = static_cast<double>(tp[ci]) / static_cast<double>(denom);
    sum += out.per_class[ci];
    ++present_count;
  }
  out.miou = present_count > 0 ? sum / static_cast<double>(present_count) : 0.0;
  return out;
}

APResult average_precision(std::span<const double> scores,
                           std::span<const std::uint8_t> is_positive) {
  if (scores.size() != is_positive.size())
    throw ShapeError("average_precision: score/label length mismatch");
  APResult out;
  long long positives = std::count_if(is_positive.begin(), is_positive.end(),
                                      [](std::uint8_t v) { return v != 0; });
  if (positives == 0) return out;  // skipped and flagged
  out.has_positives = true;

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<double> precision(order.size()), recall(order.size());
  long long tp = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    tp += is_positive[order[i]] != 0;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(positives);
  }
  // interpolated precision: running max from the right
  std::vector<double> interp(precision);
  for (size_t i = interp.size() - 1; i-- > 0;) interp[i] = std::max(interp[i], interp[i + 1]);

  double acc = 0;
  size_t cursor = 0;
  for (int k = 0; k <= 100; ++k) {
    double level = static_cast<double>(k) / 100.0;
    while (cursor < recall.size() && recall[cursor] < level) ++cursor;
    if (cursor < recall.size()) acc += interp[cursor];
  }
  out.ap = acc / 101.0;
  return out;
}

MAPResult mean_average_precision(std::span<const real> mean_probs, Index num_classes,
                                 std::span<const std::int32_t> gt,
                                 std::span<const std::uint8_t> mask) {
  const size_t E = gt.size();
  if (mean_probs.size() != E * static_cast<size_t>(num_classes))
    throw ShapeError("mean_average_precision: probability matrix size mismatch");

  std::vector<size_t> keep;
  keep.reserve(E);
  for (size_t e = 0; e < E; ++e) {
    if (!mask.empty() && !mask[e]) continue;
    if (gt[e] == kIgnoreLabel) continue;
    keep.push_back(e);
  }
  if (keep.empty()) throw ContractError("mean_average_precision: mask excludes every element");

  MAPResult out;
  out.per_class.resize(static_cast<size_t>(num_classes));
  double sum = 0;
  std::vector<double> scores(keep.size());
  std::vector<std::uint8_t> pos(keep.size());
  for (Index c = 0; c < num_classes; ++c) {
    for (size_t i = 0; i < keep.size(); ++i) {
      scores[i] = static_cast<double>(
          mean_probs[keep[i] * static_cast<size_t>(num_classes) + static_cast<size_t>(c)]);
      pos[i] = gt[keep[i]] == c;
    }
    APResult ap = average_precision(scores, pos);
    out.per_class[static_cast<size_t>(c)] = ap;
    if (ap.has_positives) {
      sum += ap.ap;
      ++out.classes_used;
    }
  }
  out.map = out.classes_used > 0 ? sum / static_cast<double>(out.classes_used) : 0.0;
  return out;
}

std::string to_string(PartitionKind kind) { return kind == PartitionKind::TpFn ? "tp_fn" : "tp_fp"; }

double bhattacharyya(const Histogram2& hist, bool paper_literal) {
  if (hist.tp.size() != hist.other.size() ||
      static_cast<Index>(hist.tp.size()) != hist.bin_count())
    throw ShapeError("bhattacharyya: malformed histogram");
  double sum_p = std::accumulate(hist.tp.begin(), hist.tp.end(), 0.0);
  double sum_q = std::accumulate(hist.other.begin(), hist.other.end(), 0.0);
  if (sum_p <= 0 || sum_q <= 0)
    throw ContractError("bhattacharyya: a partition has no mass");

  double acc = 0;
  for (size_t i = 0; i < hist.tp.size(); ++i) {
    double p = hist.tp[i], q = hist.other[i];
    if (!paper_literal) {
      p /= sum_p;
      q /= sum_q;
    }
    acc += std::sqrt(p * q);
  }
  return paper_literal ? acc / static_cast<double>(hist.bin_count()) : acc;
}

HistAxis hist_axis_from_string(const std::string& s) {
  if (s == "score") return HistAxis::Score;
  if (s == "entropy_paper") return HistAxis::EntropyPaper;
  if (s == "entropy_mean") return HistAxis::EntropyMean;
  if (s == "distance") return HistAxis::Distance;
  throw ConfigError(strfmt("unknown histogram axis '%s'", s.c_str()));
}

std::string to_string(HistAxis axis) {
  switch (axis) {
    case HistAxis::Score: return "score";
    case HistAxis::EntropyPaper: return "entropy_paper";
    case HistAxis::EntropyMean: return "entropy_mean";
    case HistAxis::Distance: return "distance";
  }
  return "?";
}

static double axis_value(const ElementRecord& r, HistAxis axis) {
  switch (axis) {
    case HistAxis::Score: return static_cast<double>(r.mean_score);
    case HistAxis::EntropyPaper: return static_cast<double>(r.entropy_paper);
    case HistAxis::EntropyMean: return static_cast<double>(r.entropy_mean);
    case HistAxis::Distance: return static_cast<double>(r.dist_to_surface);
  }
  return 0;
}

static Index bin_of(double v, const std::vector<double>& edges) {
  // clamp to the boundary bins
  const Index bins = static_cast<Index>(edges.size()) - 1;
  if (v < edges.front()) return 0;
  if (v >= edges.back()) return bins - 1;
  Index lo = 0, hi = bins - 1;
  while (lo < hi) {
    Index mid = (lo + hi + 1) / 2;
    if (v >= edges[static_cast<size_t>(mid)])
      lo = mid;
    else
      hi = mid - 1;
  }
  return lo;
}

std::vector<double> uniform_edges(double lo, double hi, Index bins) {
  if (bins < 1 || !(hi > lo)) throw ConfigError("uniform_edges: need bins >= 1 and hi > lo");
  std::vector<double> edges(static_cast<size_t>(bins) + 1);
  for (Index i = 0; i <= bins; ++i)
    edges[static_cast<size_t>(i)] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return edges;
}

Histogram2 bin_predictions(std::span<const ElementRecord> records,
                           const std::vector<HistAxis>& axes,
                           const std::vector<std::vector<double>>& edges, PartitionKind kind) {
  if (axes.empty() || axes.size() > 2)
    throw ConfigError("bin_predictions: need 1 or 2 axes");
  if (edges.size() != axes.size())
    throw ConfigError("bin_predictions: one edge vector per axis");
  for (const auto& e : edges) {
    if (e.size() < 2) throw ConfigError("bin_predictions: need at least one bin");
    if (!std::is_sorted(e.begin(), e.end()) ||
        std::adjacent_find(e.begin(), e.end()) != e.end())
      throw ConfigError("bin_predictions: bin edges must be strictly ascending");
  }

  Histogram2 hist;
  hist.n_axes = static_cast<int>(axes.size());
  hist.edges0 = edges[0];
  if (hist.n_axes == 2) hist.edges1 = edges[1];
  hist.kind = kind;
  hist.tp.assign(static_cast<size_t>(hist.bin_count()), 0.0);
  hist.other.assign(static_cast<size_t>(hist.bin_count()), 0.0);

  for (const ElementRecord& r : records) {
    if (!r.evaluated) continue;
    Index b0 = bin_of(axis_value(r, axes[0]), hist.edges0);
    Index b1 = hist.n_axes == 2 ? bin_of(axis_value(r, axes[1]), hist.edges1) : 0;
    size_t bin = static_cast<size_t>(b0 * hist.bins1() + b1);
    if (r.predicted == r.true_label)
      hist.tp[bin] += 1;
    else
      hist.other[bin] += 1;
  }
  return hist;
}

PrfResult accuracy_precision_recall(std::span<const ElementRecord> records, Index num_classes) {
  std::vector<long long> tp(static_cast<size_t>(num_classes), 0);
  std::vector<long long> fp(static_cast<size_t>(num_classes), 0);
  std::vector<long long> fn(static_cast<size_t>(num_classes), 0);
  long long correct = 0, total = 0;
  for (const ElementRecord& r : records) {
    if (!r.evaluated || r.true_label == kIgnoreLabel) continue;
    ++total;
    if (r.predicted == r.true_label) {
      ++correct;
      ++tp[static_cast<size_t>(r.predicted)];
    } else {
      ++fp[static_cast<size_t>(r.predicted)];
      ++fn[static_cast<size_t>(r.true_label)];
    }
  }
  if (total == 0) throw ContractError("accuracy_precision_recall: empty dump");

  PrfResult out;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  out.precision.assign(static_cast<size_t>(num_classes), 0.0);
  out.recall.assign(static_cast<size_t>(num_classes), 0.0);
  for (Index c = 0; c < num_classes; ++c) {
    size_t ci = static_cast<size_t>(c);
    if (tp[ci] + fp[ci] > 0)
      out.precision[ci] = static_cast<double>(tp[ci]) / static_cast<double>(tp[ci] + fp[ci]);
    if (tp[ci] + fn[ci] > 0)
      out.recall[ci] = static_cast<double>(tp[ci]) / static_cast<double>(tp[ci] + fn[ci]);
  }
  return out;
}

}  // namespace bcnn
