#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bcnn/dataset.hpp"
#include "bcnn/network.hpp"

namespace bcnn {

// Mean over unmasked elements of -ln(p[target]), probabilities clamped to
// >= 1e-12. probs is [B, C] or [B, C, S...]; targets and mask are flattened
// [B * prod(S)]. Elements labeled kIgnoreLabel are skipped.
Tensor cross_entropy(const Tensor& probs, const std::vector<std::int32_t>& targets,
                     const std::vector<std::uint8_t>& mask = {});

struct AdamConfig {
  real lr = real(1e-3);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
  real weight_decay = real(0);  // decoupled; omega in deterministic runs
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg);

  void zero_grad();
  void step();
  Index step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<real>> m_, v_;
  AdamConfig cfg_;
  Index step_ = 0;
};

struct EpochStats {
  double loss = 0;        // mean per-batch objective (free energy or CE)
  double complexity = 0;  // mean per-batch (beta/n)(log q - log prior)
  double nll = 0;
  double accuracy = 0;
  Index batches = 0;
};

// One pass over the dataset in a seeded shuffle order. Bayesian networks
// minimize the free energy with n = number of minibatches (one weight sample
// per batch); deterministic networks minimize cross-entropy, with weight
// decay handled by the optimizer.
EpochStats train_epoch(Network& net, const Dataset& data, Index batch_size, real beta,
                       AdamOptimizer& opt, std::uint64_t run_seed, Index epoch);

// Epoch metrics CSV: epoch, split, loss, complexity_term, nll_term, accuracy.
void append_epoch_metrics(const std::string& csv_path, Index epoch, const std::string& split,
                          const EpochStats& stats);

// Gathers rows `indices` of a dataset into one batch input tensor plus
// flattened targets/mask slices (exposed for the evaluation loop).
struct Batch {
  Tensor inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};
Batch gather_batch(const Dataset& data, const std::vector<Index>& indices);

}  // namespace bcnn
