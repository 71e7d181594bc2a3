#pragma once

#include <string>
#include <vector>

#include "bcnn/tensor.hpp"

namespace bcnn {

// Convolution geometry. All extent vectors have one entry per spatial
// dimension (rank 2 or 3).
struct ConvSpec {
  Index out_channels = 0;
  std::vector<Index> kernel;
  std::vector<Index> stride;
  std::vector<Index> dilation;
  std::vector<Index> padding;

  // Uniform extents across `rank` spatial dims.
  static ConvSpec uniform(Index out_channels, Index rank, Index kernel, Index stride = 1,
                          Index dilation = 1, Index padding = 0);

  void validate(size_t spatial_rank) const;
  // floor((in + 2*pad - dilation*(k-1) - 1)/stride) + 1 per dim.
  std::vector<Index> output_extents(const std::vector<Index>& in) const;
};

// input [B, Cin, S...], weights [Cout, Cin, K...], bias [Cout].
// Cross-correlation (no kernel flip) with stride/dilation/padding.
Tensor conv_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    const ConvSpec& spec);

// input [B, Cin, S...], weights [Cin, Cout, K...], bias [Cout].
// Kernel extent must equal stride per dim; output extent = in * stride.
// With weights shared, this is the adjoint of conv_forward for the same spec.
Tensor conv_transpose_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                              const ConvSpec& spec);

// Pad-free max pooling; spatial extents must divide by the window. Gradient
// routes to the first maximal element in scan order.
Tensor max_pool_forward(const Tensor& input, const std::vector<Index>& window);

struct BatchNormState {
  std::vector<real> running_mean;
  std::vector<real> running_var;
  Index batches_seen = 0;
};

enum class BatchNormMode { Train, Eval };

// Per-channel normalization (channel axis 1). Train mode normalizes by batch
// statistics (biased variance) and updates the running stats by EMA; eval
// mode uses the running stats. Throws NumericError when the per-channel
// reduction has fewer than 2 elements in train mode.
Tensor batch_norm_forward(const Tensor& input, const Tensor& scale, const Tensor& shift,
                          BatchNormState& state, BatchNormMode mode, real eps = real(1e-5),
                          real momentum = real(0.1));

enum class ActKind { None, Softplus, Relu, Softmax, NormalizedSoftplus };

ActKind act_kind_from_string(const std::string& s);
std::string to_string(ActKind kind);

// Softmax and normalized softplus normalize along `axis`; the elementwise
// kinds ignore it.
Tensor activation(ActKind kind, const Tensor& input, Index axis = 1);

// input [B, F], weights [F, U], bias [U].
Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);

// Concatenate along the channel axis (dim 1); all other extents must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);

}  // namespace bcnn
