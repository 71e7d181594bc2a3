#pragma once

#include <cstdint>
#include <vector>

#include "bcnn/tensor.hpp"

namespace bcnn {

// T stochastic forward passes over E elements with C classes each.
// probs is laid out [T][E][C]; every p_t slice must be a probability vector.
struct PredictionSet {
  Index T = 0, E = 0, C = 0;
  std::vector<real> probs;
  std::vector<std::int32_t> labels;      // ground truth per element
  std::vector<std::uint8_t> eval_mask;   // optional, per element
  std::vector<float> dist_to_surface;    // optional, per element (voxel tasks)

  real prob(Index t, Index e, Index c) const { return probs[(t * E + e) * C + c]; }
  void validate() const;
};

struct MeanPrediction {
  std::vector<real> mean;            // [E][C]
  std::vector<std::int32_t> label;   // argmax, ties toward the lowest index
};

// p_bar = (1/T) sum_t p_t.
MeanPrediction predictive_mean(const PredictionSet& ps);

struct EntropyResult {
  // H(c) = -sum_t p_t(c) ln p_t(c): summed over passes, per class.
  std::vector<real> per_class;  // [E][C]
  // H = -sum_c p_bar(c) ln p_bar(c): entropy of the mean, per element.
  std::vector<real> of_mean;    // [E]
};

EntropyResult predictive_entropy(const PredictionSet& ps);

// sigma2_a = (1/T) sum_t diag(p_t) - p_t p_t^T, one CxC matrix per element.
std::vector<real> aleatoric(const PredictionSet& ps);

// sigma2_e = (1/T) sum_t (p_t - p_bar)(p_t - p_bar)^T.
std::vector<real> epistemic(const PredictionSet& ps);

// Per-element scalar view used by dumps and histograms. Uncertainty scalars
// are taken at the predicted label l: mean score p_bar(l), paper-literal
// entropy H(l), entropy of the mean, and the (l,l) diagonal of each
// covariance.
struct ElementRecord {
  Index id = 0;
  std::int32_t true_label = 0;
  std::int32_t predicted = 0;
  real mean_score = 0;
  real entropy_paper = 0;
  real entropy_mean = 0;
  real aleatoric_diag = 0;
  real epistemic_diag = 0;
  float dist_to_surface = -1;  // < 0 when not a voxel task
  bool evaluated = true;
};

std::vector<ElementRecord> summarize(const PredictionSet& ps);

inline const std::vector<std::string>& element_dump_header() {
  static const std::vector<std::string> h{
      "element",          "true_label",   "predicted_label", "mean_score",
      "entropy_paper",    "entropy_mean", "aleatoric_diag",  "epistemic_diag",
      "dist_to_surface"};
  return h;
}

}  // namespace bcnn
