#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bcnn/uncertainty.hpp"

namespace bcnn {

struct IoUResult {
  std::vector<double> per_class;  // valid where present[c]
  std::vector<bool> present;      // class appears in prediction or ground truth
  double miou = 0;                // mean over present classes
};

// Per class c: TP/(TP+FP+FN) over masked elements. Elements labeled
// kIgnoreLabel are skipped. Classes absent from both prediction and ground
// truth are excluded from the mean.
IoUResult iou(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt,
              std::span<const std::uint8_t> mask, Index num_classes);

struct APResult {
  double ap = 0;
  bool has_positives = false;
};

// COCO-style AP: interpolated precision sampled at the 101 recall levels
// {0, 0.01, ..., 1.00}; ties broken by stable element order; recall levels
// beyond the maximum achieved recall contribute 0.
APResult average_precision(std::span<const double> scores,
                           std::span<const std::uint8_t> is_positive);

struct MAPResult {
  std::vector<APResult> per_class;  // has_positives=false marks skipped classes
  double map = 0;
  Index classes_used = 0;
};

// One-vs-rest AP per class from mean probabilities [E][C]; mAP averages the
// classes that have at least one positive.
MAPResult mean_average_precision(std::span<const real> mean_probs, Index num_classes,
                                 std::span<const std::int32_t> gt,
                                 std::span<const std::uint8_t> mask);

enum class PartitionKind { TpFn, TpFp };

std::string to_string(PartitionKind kind);

// 1D or 2D histogram of a confidence signal, split into correct predictions
// (tp) and incorrect ones (fn or fp, depending on the partition naming).
struct Histogram2 {
  int n_axes = 1;
  std::vector<double> edges0;  // bins+1 ascending edges
  std::vector<double> edges1;  // second axis when n_axes == 2
  std::vector<double> tp;      // counts, flattened [bins0][bins1]
  std::vector<double> other;
  PartitionKind kind = PartitionKind::TpFn;

  Index bins0() const { return static_cast<Index>(edges0.size()) - 1; }
  Index bins1() const { return n_axes == 2 ? static_cast<Index>(edges1.size()) - 1 : 1; }
  Index bin_count() const { return bins0() * bins1(); }
};

// Default: each partition normalized to a probability mass function,
// BC = sum sqrt(p_i q_i) in [0, 1] (1 = full overlap). The paper-literal
// variant applies 1/N to the raw counts instead.
double bhattacharyya(const Histogram2& hist, bool paper_literal = false);

enum class HistAxis { Score, EntropyPaper, EntropyMean, Distance };

HistAxis hist_axis_from_string(const std::string& s);
std::string to_string(HistAxis axis);

// Routes each evaluated record to a bin by its axis values; out-of-range
// values clamp to the boundary bins. A record counts as tp when the
// predicted label equals the true label.
Histogram2 bin_predictions(std::span<const ElementRecord> records,
                           const std::vector<HistAxis>& axes,
                           const std::vector<std::vector<double>>& edges, PartitionKind kind);

std::vector<double> uniform_edges(double lo, double hi, Index bins);

struct PrfResult {
  double accuracy = 0;
  std::vector<double> precision;  // per class; 0 when the class is never predicted
  std::vector<double> recall;     // per class; 0 when the class has no instances
};

PrfResult accuracy_precision_recall(std::span<const ElementRecord> records, Index num_classes);

}  // namespace bcnn
