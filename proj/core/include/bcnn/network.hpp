#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bcnn/ops.hpp"
#include "bcnn/variational.hpp"

namespace bcnn {

enum class LayerOp { Conv, ConvTranspose, MaxPool, Dense, ConcatSkip };
enum class NetworkMode { Deterministic, Bayesian };
enum class WeightMode { Mean, Sample };

struct LayerSpec {
  LayerOp op = LayerOp::Conv;
  ConvSpec conv;                   // Conv / ConvTranspose
  Index dense_units = 0;           // Dense
  std::vector<Index> pool_window;  // MaxPool
  int skip_source = -1;            // ConcatSkip: index of an earlier layer
  ActKind activation = ActKind::None;
  bool batch_norm = false;
};

struct NetworkSpec {
  std::string name = "net";
  NetworkMode mode = NetworkMode::Deterministic;
  std::vector<LayerSpec> layers;
  Index num_classes = 0;
  Shape input_shape;  // [channels, spatial...] without the batch dim
  Prior prior;        // bayesian mode
  real sigma0 = real(0.5);

  // Architecture file (JSON). Mode, prior and sigma0 are optional there and
  // usually overlaid by the experiment configuration.
  static NetworkSpec load(const std::string& path);
  static NetworkSpec parse_json_text(const std::string& text);
  std::string to_json_text() const;

  // Output shape (without batch) after each layer; throws a build error
  // naming the first layer whose shapes do not chain.
  std::vector<Shape> chain_shapes() const;
  void validate() const;
};

// Per-layer trainable state. In bayesian mode weights and biases carry
// (mu, rho); batch-norm scale/shift stay point estimates in both modes.
struct ComplexityTerms {
  Tensor log_q;
  Tensor log_prior;
};

class Network {
 public:
  static Network build(const NetworkSpec& spec, RngStream& rng);

  // input [B, C, S...]. Sample mode draws fresh weights per variational
  // layer from rng; mean mode and deterministic networks need no rng.
  // When `complexity` is given (bayesian sample mode), the summed
  // log q(w|theta) and log P(w) of the drawn weights are returned through it.
  Tensor forward(const Tensor& input, WeightMode wmode, RngStream* rng, bool train_mode,
                 ComplexityTerms* complexity = nullptr);

  const NetworkSpec& spec() const { return spec_; }
  // Every gradient-tracked tensor, in a stable order.
  std::vector<Tensor> trainable();
  Index weight_scalars() const;

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  struct LayerState {
    LayerSpec spec;
    VariationalParam w_vp, b_vp;  // bayesian
    Tensor w, b;                  // deterministic
    Tensor bn_scale, bn_shift;
    BatchNormState bn_state;
  };

  NetworkSpec spec_;
  std::vector<LayerState> layers_;
};

}  // namespace bcnn
