#include "bcnn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>

namespace bcnn {

using detail::Node;
using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic>;
using EMatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class M>
using Map = Eigen::Map<M>;
template <class M>
using StridedMap = Eigen::Map<M, 0, Eigen::OuterStride<>>;

// OpenMP at the call sites owns all parallelism: outputs are split into
// disjoint blocks per thread, so accumulation order per element is fixed.
// Eigen's own GEMM threading is disabled (it degrades badly on the
// tall-skinny products convolution produces).
namespace {
const bool kEigenPinned = [] {
  Eigen::setNbThreads(1);
  return true;
}();
}  // namespace

// Column budget for im2col chunks (~32 MB of doubles at K=512).
static constexpr Index kMaxChunkElems = Index(4) << 20;
// Columns per thread-block in hand-parallelized GEMMs.
static constexpr Index kGemmBlock = 2048;

// --- ConvSpec ----------------------------------------------------------------

ConvSpec ConvSpec::uniform(Index out_channels, Index rank, Index kernel, Index stride,
                           Index dilation, Index padding) {
  ConvSpec s;
  s.out_channels = out_channels;
  s.kernel.assign(static_cast<size_t>(rank), kernel);
  s.stride.assign(static_cast<size_t>(rank), stride);
  s.dilation.assign(static_cast<size_t>(rank), dilation);
  s.padding.assign(static_cast<size_t>(rank), padding);
  return s;
}

void ConvSpec::validate(size_t spatial_rank) const {
  if (spatial_rank != 2 && spatial_rank != 3)
    throw ShapeError(strfmt("conv: spatial rank must be 2 or 3, got %zu", spatial_rank));
  auto check = [&](const std::vector<Index>& v, const char* name, Index min) {
    if (v.size() != spatial_rank)
      throw ShapeError(strfmt("conv spec: %s has %zu extents, expected %zu", name, v.size(),
                              spatial_rank));
    for (size_t d = 0; d < v.size(); ++d)
      if (v[d] < min)
        throw ShapeError(strfmt("conv spec: %s[%zu] = %lld below minimum %lld", name, d,
                                static_cast<long long>(v[d]), static_cast<long long>(min)));
  };
  if (out_channels < 1) throw ShapeError("conv spec: out_channels must be >= 1");
  check(kernel, "kernel", 1);
  check(stride, "stride", 1);
  check(dilation, "dilation", 1);
  check(padding, "padding", 0);
}

std::vector<Index> ConvSpec::output_extents(const std::vector<Index>& in) const {
  std::vector<Index> out(in.size());
  for (size_t d = 0; d < in.size(); ++d) {
    Index span = dilation[d] * (kernel[d] - 1) + 1;
    Index num = in[d] + 2 * padding[d] - span;
    if (num < 0)
      throw ShapeError(strfmt("conv: axis %zu input extent %lld too small for kernel span %lld",
                              d, static_cast<long long>(in[d]), static_cast<long long>(span)));
    out[d] = num / stride[d] + 1;
  }
  return out;
}

// --- shared geometry helpers --------------------------------------------------

namespace {

struct ConvGeom {
  size_t rank;                   // spatial rank
  Index batch, in_ch, out_ch;
  std::array<Index, 3> in_s{1, 1, 1}, out_s{1, 1, 1}, k{1, 1, 1};
  Index l_in = 1, l_out = 1, kk = 1;  // prod of spatial extents / kernel taps
  // tap_coord[d][o*k_d + t] = input coordinate along d, or -1 if padded out.
  std::array<std::vector<Index>, 3> tap_coord;
};

ConvGeom conv_geometry(const Tensor& input, const Tensor& weights, const Tensor& bias,
                       const ConvSpec& spec) {
  if (input.rank() < 4 || input.rank() > 5)
    throw ShapeError(strfmt("conv: input must be [batch, channels, spatial(2|3)], got %s",
                            shape_str(input.shape()).c_str()));
  ConvGeom g;
  g.rank = static_cast<size_t>(input.rank()) - 2;
  spec.validate(g.rank);
  g.batch = input.dim(0);
  g.in_ch = input.dim(1);
  g.out_ch = spec.out_channels;
  std::vector<Index> in_extents(g.rank);
  for (size_t d = 0; d < g.rank; ++d) {
    g.in_s[d] = input.dim(static_cast<Index>(d) + 2);
    in_extents[d] = g.in_s[d];
    g.k[d] = spec.kernel[d];
  }
  auto out_extents = spec.output_extents(in_extents);

  Shape expect_w{g.out_ch, g.in_ch};
  for (size_t d = 0; d < g.rank; ++d) expect_w.push_back(spec.kernel[d]);
  if (weights.shape() != expect_w)
    throw ShapeError(strfmt("conv: weight shape %s, expected %s for input %s",
                            shape_str(weights.shape()).c_str(), shape_str(expect_w).c_str(),
                            shape_str(input.shape()).c_str()));
  if (bias.shape() != Shape{g.out_ch})
    throw ShapeError(strfmt("conv: bias shape %s, expected [%lld]",
                            shape_str(bias.shape()).c_str(),
                            static_cast<long long>(g.out_ch)));

  for (size_t d = 0; d < g.rank; ++d) {
    g.out_s[d] = out_extents[d];
    g.l_in *= g.in_s[d];
    g.l_out *= g.out_s[d];
    g.kk *= g.k[d];
    g.tap_coord[d].assign(static_cast<size_t>(g.out_s[d] * g.k[d]), -1);
    for (Index o = 0; o < g.out_s[d]; ++o)
      for (Index t = 0; t < g.k[d]; ++t) {
        Index c = o * spec.stride[d] - spec.padding[d] + t * spec.dilation[d];
        if (c >= 0 && c < g.in_s[d]) g.tap_coord[d][static_cast<size_t>(o * g.k[d] + t)] = c;
      }
  }
  return g;
}

// Input offsets of the kk taps of output position l, or -1 where padded out.
// Shared across input channels.
inline void tap_offsets(const ConvGeom& g, Index l, Index* offs) {
  std::array<Index, 3> o{0, 0, 0};
  Index rem = l;
  for (size_t d = g.rank; d-- > 0;) {
    o[d] = rem % g.out_s[d];
    rem /= g.out_s[d];
  }
  Index n = 0;
  if (g.rank == 2) {
    for (Index t0 = 0; t0 < g.k[0]; ++t0) {
      Index c0 = g.tap_coord[0][static_cast<size_t>(o[0] * g.k[0] + t0)];
      for (Index t1 = 0; t1 < g.k[1]; ++t1) {
        Index c1 = g.tap_coord[1][static_cast<size_t>(o[1] * g.k[1] + t1)];
        offs[n++] = (c0 >= 0 && c1 >= 0) ? c0 * g.in_s[1] + c1 : -1;
      }
    }
  } else {
    for (Index t0 = 0; t0 < g.k[0]; ++t0) {
      Index c0 = g.tap_coord[0][static_cast<size_t>(o[0] * g.k[0] + t0)];
      for (Index t1 = 0; t1 < g.k[1]; ++t1) {
        Index c1 = g.tap_coord[1][static_cast<size_t>(o[1] * g.k[1] + t1)];
        bool ok01 = c0 >= 0 && c1 >= 0;
        Index base = (c0 * g.in_s[1] + c1) * g.in_s[2];
        for (Index t2 = 0; t2 < g.k[2]; ++t2) {
          Index c2 = g.tap_coord[2][static_cast<size_t>(o[2] * g.k[2] + t2)];
          offs[n++] = (ok01 && c2 >= 0) ? base + c2 : -1;
        }
      }
    }
  }
}

// Fills col (K x cols, column-major, K = in_ch*kk) for the global column
// range [c0, c0+cols) where column index j maps to sample j / l_out and
// output position j % l_out.
void im2col_chunk(const ConvGeom& g, const real* input, Index c0, Index cols, real* col) {
#pragma omp parallel
  {
    std::vector<Index> offs(static_cast<size_t>(g.kk));
#pragma omp for schedule(static)
    for (Index j = 0; j < cols; ++j) {
      const Index b = (c0 + j) / g.l_out;
      const Index l = (c0 + j) % g.l_out;
      tap_offsets(g, l, offs.data());
      const real* sample = input + b * g.in_ch * g.l_in;
      real* dst = col + j * (g.in_ch * g.kk);
      for (Index ci = 0; ci < g.in_ch; ++ci) {
        const real* in_c = sample + ci * g.l_in;
        for (Index t = 0; t < g.kk; ++t)
          *dst++ = offs[static_cast<size_t>(t)] >= 0 ? in_c[offs[static_cast<size_t>(t)]]
                                                     : real(0);
      }
    }
  }
}

// Adjoint of im2col_chunk: scatter-adds col columns back into the input
// gradient. Overlapping taps forbid parallelizing over columns.
void col2im_chunk(const ConvGeom& g, const real* col, Index c0, Index cols, real* input_grad) {
  std::vector<Index> offs(static_cast<size_t>(g.kk));
  for (Index j = 0; j < cols; ++j) {
    const Index b = (c0 + j) / g.l_out;
    const Index l = (c0 + j) % g.l_out;
    tap_offsets(g, l, offs.data());
    real* sample = input_grad + b * g.in_ch * g.l_in;
    const real* src = col + j * (g.in_ch * g.kk);
    for (Index ci = 0; ci < g.in_ch; ++ci) {
      real* in_c = sample + ci * g.l_in;
      for (Index t = 0; t < g.kk; ++t, ++src)
        if (offs[static_cast<size_t>(t)] >= 0) in_c[offs[static_cast<size_t>(t)]] += *src;
    }
  }
}

// Copies chunk columns [c0, c0+cols) of the [batch, out_ch, l_out] tensor
// into a (out_ch x cols) col-major buffer, or back (with bias on the way
// out). Chunk ranges may span sample boundaries.
template <bool kWrite>
void stage_output_chunk(const ConvGeom& g, Index c0, Index cols, real* tensor_data, real* buf,
                        const real* bias) {
  Index done = 0;
  while (done < cols) {
    const Index b = (c0 + done) / g.l_out;
    const Index l = (c0 + done) % g.l_out;
    const Index run = std::min(cols - done, g.l_out - l);
    real* out_b = tensor_data + b * g.out_ch * g.l_out;
#pragma omp parallel for schedule(static)
    for (Index co = 0; co < g.out_ch; ++co) {
      real* row = out_b + co * g.l_out + l;
      real* stage = buf + co * cols + done;  // buf is (out_ch x cols) row-contiguous
      if constexpr (kWrite) {
        const real bias_c = bias[co];
        for (Index j = 0; j < run; ++j) row[j] = stage[j] + bias_c;
      } else {
        for (Index j = 0; j < run; ++j) stage[j] = row[j];
      }
    }
    done += run;
  }
}

Index chunk_columns(Index k_rows, Index total_cols) {
  Index c = std::max<Index>(Index(1), kMaxChunkElems / std::max<Index>(k_rows, 1));
  return std::min(c, total_cols);
}

}  // namespace

// --- conv ---------------------------------------------------------------------

Tensor conv_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                    const ConvSpec& spec) {
  ConvGeom g = conv_geometry(input, weights, bias, spec);

  Shape out_shape{g.batch, g.out_ch};
  for (size_t d = 0; d < g.rank; ++d) out_shape.push_back(g.out_s[d]);
  auto node = detail::make_node(out_shape, {input.node(), weights.node(), bias.node()}, "conv");

  const Index K = g.in_ch * g.kk;
  const Index total_cols = g.batch * g.l_out;
  const Index chunk = chunk_columns(K, total_cols);
  RealVec col_buf(static_cast<size_t>(K * chunk));
  Map<EMat> col(col_buf.data(), K, chunk);
  RealVec stage(static_cast<size_t>(g.out_ch * chunk));
  Map<const EMatRM> wm(weights.values().data(), g.out_ch, K);
  const real* bptr = bias.values().data();

  for (Index c0 = 0; c0 < total_cols; c0 += chunk) {
    const Index cols = std::min(chunk, total_cols - c0);
    im2col_chunk(g, input.values().data(), c0, cols, col.data());
    // stage is (out_ch x cols) with contiguous rows: write it as the
    // transposed view of a col-major (cols x out_ch) GEMM destination
    Map<EMat> stage_m(stage.data(), cols, g.out_ch);
#pragma omp parallel for schedule(static)
    for (Index j0 = 0; j0 < cols; j0 += kGemmBlock) {
      const Index n = std::min(kGemmBlock, cols - j0);
      stage_m.block(j0, 0, n, g.out_ch).noalias() =
          col.block(0, j0, K, n).transpose() * wm.transpose();
    }
    // stage_m(j, co) sits at co*cols + j: exactly the row-contiguous layout
    stage_output_chunk<true>(g, c0, cols, node->value.data(), stage.data(), bptr);
  }

  if (node->requires_grad) {
    node->backprop = [g, spec](Node& self) {
      Node& in = *self.parents[0];
      Node& w = *self.parents[1];
      Node& bias_n = *self.parents[2];
      const Index K = g.in_ch * g.kk;
      const Index total_cols = g.batch * g.l_out;
      const Index chunk = chunk_columns(K, total_cols);
      RealVec col_buf(static_cast<size_t>(K * chunk));
      RealVec dcol_buf(static_cast<size_t>(K * chunk));
      Map<EMat> col(col_buf.data(), K, chunk);
      Map<EMat> dcol(dcol_buf.data(), K, chunk);
      EMat dw_tmp(K, g.out_ch);
      RealVec stage(static_cast<size_t>(g.out_ch * chunk));
      Map<const EMatRM> wm(w.value.data(), g.out_ch, K);
      for (Index c0 = 0; c0 < total_cols; c0 += chunk) {
        const Index cols = std::min(chunk, total_cols - c0);
        stage_output_chunk<false>(g, c0, cols, self.grad.data(), stage.data(), nullptr);
        Map<const EMatRM> dout_m(stage.data(), g.out_ch, cols);
        if (w.requires_grad) {
          im2col_chunk(g, in.value.data(), c0, cols, col.data());
          const Index k_block = std::max<Index>(Index(1), (K + 1) / 2);
#pragma omp parallel for schedule(static)
          for (Index k0 = 0; k0 < K; k0 += k_block) {
            const Index kn = std::min(k_block, K - k0);
            dw_tmp.block(k0, 0, kn, g.out_ch).noalias() =
                col.block(k0, 0, kn, cols) * dout_m.transpose();
          }
          for (Index co = 0; co < g.out_ch; ++co)
            for (Index k = 0; k < K; ++k)
              w.grad[static_cast<size_t>(co * K + k)] += dw_tmp(k, co);
        }
        if (bias_n.requires_grad) {
          Map<Eigen::Matrix<real, Eigen::Dynamic, 1>> dbv(bias_n.grad.data(), g.out_ch);
          dbv.noalias() += dout_m.rowwise().sum();
        }
        if (in.requires_grad) {
#pragma omp parallel for schedule(static)
          for (Index j0 = 0; j0 < cols; j0 += kGemmBlock) {
            const Index n = std::min(kGemmBlock, cols - j0);
            dcol.block(0, j0, K, n).noalias() =
                wm.transpose() * dout_m.middleCols(j0, n);
          }
          col2im_chunk(g, dcol.data(), c0, cols, in.grad.data());
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- conv transpose -------------------------------------------------------------

Tensor conv_transpose_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                              const ConvSpec& spec) {
  if (input.rank() < 4 || input.rank() > 5)
    throw ShapeError(strfmt("conv_transpose: input must be [batch, channels, spatial(2|3)], got %s",
                            shape_str(input.shape()).c_str()));
  size_t rank = static_cast<size_t>(input.rank()) - 2;
  spec.validate(rank);
  for (size_t d = 0; d < rank; ++d) {
    if (spec.kernel[d] != spec.stride[d])
      throw ContractError(strfmt(
          "conv_transpose: kernel extent %lld != stride %lld on axis %zu (unsupported)",
          static_cast<long long>(spec.kernel[d]), static_cast<long long>(spec.stride[d]), d));
    if (spec.dilation[d] != 1 || spec.padding[d] != 0)
      throw ContractError("conv_transpose: dilation must be 1 and padding 0");
  }

  const Index batch = input.dim(0), in_ch = input.dim(1), out_ch = spec.out_channels;
  std::array<Index, 3> in_s{1, 1, 1}, k{1, 1, 1};
  Index l_in = 1, l_out = 1, kk = 1;
  for (size_t d = 0; d < rank; ++d) {
    in_s[d] = input.dim(static_cast<Index>(d) + 2);
    k[d] = spec.kernel[d];
    l_in *= in_s[d];
    l_out *= in_s[d] * k[d];
    kk *= k[d];
  }

  Shape expect_w{in_ch, out_ch};
  for (size_t d = 0; d < rank; ++d) expect_w.push_back(k[d]);
  if (weights.shape() != expect_w)
    throw ShapeError(strfmt("conv_transpose: weight shape %s, expected %s",
                            shape_str(weights.shape()).c_str(), shape_str(expect_w).c_str()));
  if (bias.shape() != Shape{out_ch})
    throw ShapeError(strfmt("conv_transpose: bias shape %s, expected [%lld]",
                            shape_str(bias.shape()).c_str(), static_cast<long long>(out_ch)));

  Shape out_shape{batch, out_ch};
  for (size_t d = 0; d < rank; ++d) out_shape.push_back(in_s[d] * k[d]);
  auto node =
      detail::make_node(out_shape, {input.node(), weights.node(), bias.node()}, "conv_transpose");

  // Flattened output offset of tap t within the tile of input position l.
  std::array<Index, 3> out_s{1, 1, 1};
  for (size_t d = 0; d < rank; ++d) out_s[d] = in_s[d] * k[d];
  auto tile_base = [rank, in_s, k, out_s](Index l) {
    std::array<Index, 3> i{0, 0, 0};
    Index rem = l;
    for (size_t d = rank; d-- > 0;) {
      i[d] = rem % in_s[d];
      rem /= in_s[d];
    }
    Index base = 0;
    for (size_t d = 0; d < rank; ++d) base = base * out_s[d] + i[d] * k[d];
    return base;
  };
  std::vector<Index> tap_off(static_cast<size_t>(kk));
  {
    for (Index t = 0; t < kk; ++t) {
      std::array<Index, 3> tt{0, 0, 0};
      Index rem = t;
      for (size_t d = rank; d-- > 0;) {
        tt[d] = rem % k[d];
        rem /= k[d];
      }
      Index off = 0;
      for (size_t d = 0; d < rank; ++d) off = off * out_s[d] + tt[d];
      tap_off[static_cast<size_t>(t)] = off;
    }
  }

  const Index rows = out_ch * kk;
  const Index chunk = chunk_columns(rows, l_in);
  RealVec cols_buf(static_cast<size_t>(rows * chunk));
  Map<EMat> cols_m(cols_buf.data(), rows, chunk);
  Map<const EMatRM> wm(weights.values().data(), in_ch, rows);
  const real* bptr = bias.values().data();

  for (Index b = 0; b < batch; ++b) {
    const real* in_b = input.values().data() + b * in_ch * l_in;
    real* out_b = node->value.data() + b * out_ch * l_out;
    for (Index c = 0; c < out_ch; ++c)
      std::fill(out_b + c * l_out, out_b + (c + 1) * l_out, bptr[c]);
    for (Index l0 = 0; l0 < l_in; l0 += chunk) {
      Index nc = std::min(chunk, l_in - l0);
      StridedMap<const EMatRM> in_m(in_b + l0, in_ch, nc, Eigen::OuterStride<>(l_in));
#pragma omp parallel for schedule(static)
      for (Index j0 = 0; j0 < nc; j0 += kGemmBlock) {
        const Index n = std::min(kGemmBlock, nc - j0);
        cols_m.block(0, j0, rows, n).noalias() = wm.transpose() * in_m.middleCols(j0, n);
      }
#pragma omp parallel for schedule(static)
      for (Index j = 0; j < nc; ++j) {
        Index base = tile_base(l0 + j);
        const real* src = cols_m.data() + j * rows;
        for (Index co = 0; co < out_ch; ++co) {
          real* dst = out_b + co * l_out + base;
          for (Index t = 0; t < kk; ++t) dst[tap_off[static_cast<size_t>(t)]] += src[co * kk + t];
        }
      }
    }
  }

  if (node->requires_grad) {
    auto geom = std::make_shared<std::vector<Index>>(tap_off);
    node->backprop = [rank, batch, in_ch, out_ch, in_s, k, l_in, l_out, kk, out_s, tile_base,
                      geom](Node& self) {
      Node& in = *self.parents[0];
      Node& w = *self.parents[1];
      Node& bias_n = *self.parents[2];
      const std::vector<Index>& tap_off = *geom;
      const Index rows = out_ch * kk;
      const Index chunk = chunk_columns(rows, l_in);
      RealVec dcols_buf(static_cast<size_t>(rows * chunk));
      Map<EMat> dcols(dcols_buf.data(), rows, chunk);
      Map<const EMatRM> wm(w.value.data(), in_ch, rows);
      for (Index b = 0; b < batch; ++b) {
        const real* dout_b = self.grad.data() + b * out_ch * l_out;
        if (bias_n.requires_grad) {
          for (Index co = 0; co < out_ch; ++co) {
            real acc = 0;
            const real* p = dout_b + co * l_out;
            for (Index i = 0; i < l_out; ++i) acc += p[i];
            bias_n.grad[static_cast<size_t>(co)] += acc;
          }
        }
        for (Index l0 = 0; l0 < l_in; l0 += chunk) {
          Index nc = std::min(chunk, l_in - l0);
#pragma omp parallel for schedule(static)
          for (Index j = 0; j < nc; ++j) {
            Index base = tile_base(l0 + j);
            real* dst = dcols.data() + j * rows;
            for (Index co = 0; co < out_ch; ++co) {
              const real* src = dout_b + co * l_out + base;
              for (Index t = 0; t < kk; ++t) dst[co * kk + t] = src[tap_off[static_cast<size_t>(t)]];
            }
          }
          if (w.requires_grad) {
            StridedMap<const EMatRM> in_m(in.value.data() + b * in_ch * l_in + l0, in_ch, nc,
                                          Eigen::OuterStride<>(l_in));
            EMat dw_tmp(rows, in_ch);
            const Index r_block = std::max<Index>(Index(1), (rows + 1) / 2);
#pragma omp parallel for schedule(static)
            for (Index r0 = 0; r0 < rows; r0 += r_block) {
              const Index rn = std::min(r_block, rows - r0);
              dw_tmp.block(r0, 0, rn, in_ch).noalias() =
                  dcols.block(r0, 0, rn, nc) * in_m.transpose();
            }
            for (Index ci = 0; ci < in_ch; ++ci)
              for (Index r = 0; r < rows; ++r)
                w.grad[static_cast<size_t>(ci * rows + r)] += dw_tmp(r, ci);
          }
          if (in.requires_grad) {
            EMat din_tmp(nc, in_ch);
#pragma omp parallel for schedule(static)
            for (Index j0 = 0; j0 < nc; j0 += kGemmBlock) {
              const Index n = std::min(kGemmBlock, nc - j0);
              din_tmp.block(j0, 0, n, in_ch).noalias() =
                  dcols.block(0, j0, rows, n).transpose() * wm.transpose();
            }
            for (Index ci = 0; ci < in_ch; ++ci) {
              real* dst = in.grad.data() + b * in_ch * l_in + ci * l_in + l0;
              const real* src = din_tmp.data() + ci * nc;
              for (Index j = 0; j < nc; ++j) dst[j] += src[j];
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- max pool -------------------------------------------------------------------

Tensor max_pool_forward(const Tensor& input, const std::vector<Index>& window) {
  if (input.rank() < 4 || input.rank() > 5)
    throw ShapeError(strfmt("max_pool: input must be [batch, channels, spatial(2|3)], got %s",
                            shape_str(input.shape()).c_str()));
  size_t rank = static_cast<size_t>(input.rank()) - 2;
  if (window.size() != rank)
    throw ShapeError(strfmt("max_pool: window rank %zu != spatial rank %zu", window.size(), rank));

  const Index batch = input.dim(0), ch = input.dim(1);
  std::array<Index, 3> in_s{1, 1, 1}, w{1, 1, 1}, out_s{1, 1, 1};
  Index l_in = 1, l_out = 1;
  for (size_t d = 0; d < rank; ++d) {
    in_s[d] = input.dim(static_cast<Index>(d) + 2);
    w[d] = window[d];
    if (w[d] < 1 || in_s[d] % w[d] != 0)
      throw ShapeError(strfmt("max_pool: axis %zu extent %lld not divisible by window %lld", d,
                              static_cast<long long>(in_s[d]), static_cast<long long>(w[d])));
    out_s[d] = in_s[d] / w[d];
    l_in *= in_s[d];
    l_out *= out_s[d];
  }

  Shape out_shape{batch, ch};
  for (size_t d = 0; d < rank; ++d) out_shape.push_back(out_s[d]);
  auto node = detail::make_node(out_shape, {input.node()}, "max_pool");

  auto argmax = std::make_shared<std::vector<Index>>(static_cast<size_t>(batch * ch * l_out));
  const real* in_ptr = input.values().data();

#pragma omp parallel for schedule(static)
  for (Index bc = 0; bc < batch * ch; ++bc) {
    const real* in_c = in_ptr + bc * l_in;
    real* out_c = node->value.data() + bc * l_out;
    Index* am = argmax->data() + bc * l_out;
    for (Index l = 0; l < l_out; ++l) {
      std::array<Index, 3> o{0, 0, 0};
      Index rem = l;
      for (size_t d = rank; d-- > 0;) {
        o[d] = rem % out_s[d];
        rem /= out_s[d];
      }
      real best = -std::numeric_limits<real>::infinity();
      Index best_idx = -1;
      for (Index t0 = 0; t0 < w[0]; ++t0)
        for (Index t1 = 0; t1 < w[1]; ++t1)
          for (Index t2 = 0; t2 < w[2]; ++t2) {
            Index c0 = o[0] * w[0] + t0;
            Index c1 = rank >= 2 ? o[1] * w[1] + t1 : 0;
            Index c2 = rank >= 3 ? o[2] * w[2] + t2 : 0;
            Index idx = rank == 2 ? c0 * in_s[1] + c1 : (c0 * in_s[1] + c1) * in_s[2] + c2;
            if (in_c[idx] > best) {  // strict: ties keep the first in scan order
              best = in_c[idx];
              best_idx = idx;
            }
          }
      out_c[l] = best;
      am[l] = best_idx;
    }
  }

  if (node->requires_grad) {
    node->backprop = [argmax, l_in, l_out, batch, ch](Node& self) {
      Node& in = *self.parents[0];
      for (Index bc = 0; bc < batch * ch; ++bc) {
        const Index* am = argmax->data() + bc * l_out;
        real* g = in.grad.data() + bc * l_in;
        const real* dout = self.grad.data() + bc * l_out;
        for (Index l = 0; l < l_out; ++l) g[am[l]] += dout[l];
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- batch norm -----------------------------------------------------------------

Tensor batch_norm_forward(const Tensor& input, const Tensor& scale, const Tensor& shift,
                          BatchNormState& state, BatchNormMode mode, real eps, real momentum) {
  if (input.rank() < 2)
    throw ShapeError(strfmt("batch_norm: input must be [batch, channels, ...], got %s",
                            shape_str(input.shape()).c_str()));
  const Index batch = input.dim(0), ch = input.dim(1);
  Index spatial = 1;
  for (Index d = 2; d < input.rank(); ++d) spatial *= input.dim(d);
  if (scale.shape() != Shape{ch} || shift.shape() != Shape{ch})
    throw ShapeError(strfmt("batch_norm: scale/shift must be [%lld], got %s and %s",
                            static_cast<long long>(ch), shape_str(scale.shape()).c_str(),
                            shape_str(shift.shape()).c_str()));

  const Index n_reduce = batch * spatial;
  if (mode == BatchNormMode::Train && n_reduce < 2)
    throw NumericError(strfmt(
        "batch_norm: degenerate variance, %lld element(s) per channel in train mode",
        static_cast<long long>(n_reduce)));

  if (state.running_mean.empty()) {
    state.running_mean.assign(static_cast<size_t>(ch), real(0));
    state.running_var.assign(static_cast<size_t>(ch), real(1));
  }
  if (static_cast<Index>(state.running_mean.size()) != ch)
    throw ShapeError("batch_norm: running stats size does not match channel count");

  auto mean_v = std::make_shared<std::vector<real>>(static_cast<size_t>(ch));
  auto invstd_v = std::make_shared<std::vector<real>>(static_cast<size_t>(ch));
  const real* in_ptr = input.values().data();

  auto channel_slice_sum = [&](Index c, auto&& fn) {
    // Iterates the [batch, spatial] slice of channel c in a fixed order.
    for (Index b = 0; b < batch; ++b) {
      const real* p = in_ptr + (b * ch + c) * spatial;
      for (Index i = 0; i < spatial; ++i) fn(p[i]);
    }
  };

  if (mode == BatchNormMode::Train) {
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < ch; ++c) {
      real s = 0, s2 = 0;
      channel_slice_sum(c, [&](real x) {
        s += x;
        s2 += x * x;
      });
      real m = s / static_cast<real>(n_reduce);
      real var = std::max(s2 / static_cast<real>(n_reduce) - m * m, real(0));
      (*mean_v)[static_cast<size_t>(c)] = m;
      (*invstd_v)[static_cast<size_t>(c)] = real(1) / std::sqrt(var + eps);
      state.running_mean[static_cast<size_t>(c)] =
          (real(1) - momentum) * state.running_mean[static_cast<size_t>(c)] + momentum * m;
      state.running_var[static_cast<size_t>(c)] =
          (real(1) - momentum) * state.running_var[static_cast<size_t>(c)] + momentum * var;
    }
    state.batches_seen++;
  } else {
    for (Index c = 0; c < ch; ++c) {
      (*mean_v)[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      (*invstd_v)[static_cast<size_t>(c)] =
          real(1) / std::sqrt(state.running_var[static_cast<size_t>(c)] + eps);
    }
  }

  auto node = detail::make_node(input.shape(), {input.node(), scale.node(), shift.node()},
                                "batch_norm");
  const real* sc = scale.values().data();
  const real* sh = shift.values().data();
#pragma omp parallel for schedule(static)
  for (Index bc = 0; bc < batch * ch; ++bc) {
    Index c = bc % ch;
    const real m = (*mean_v)[static_cast<size_t>(c)];
    const real is = (*invstd_v)[static_cast<size_t>(c)];
    const real* p = in_ptr + bc * spatial;
    real* q = node->value.data() + bc * spatial;
    for (Index i = 0; i < spatial; ++i) q[i] = sc[c] * (p[i] - m) * is + sh[c];
  }

  if (node->requires_grad) {
    bool train = mode == BatchNormMode::Train;
    node->backprop = [mean_v, invstd_v, batch, ch, spatial, train](Node& self) {
      Node& in = *self.parents[0];
      Node& scale_n = *self.parents[1];
      Node& shift_n = *self.parents[2];
      const Index n_reduce = batch * spatial;
#pragma omp parallel for schedule(static)
      for (Index c = 0; c < ch; ++c) {
        const real m = (*mean_v)[static_cast<size_t>(c)];
        const real is = (*invstd_v)[static_cast<size_t>(c)];
        const real sc = scale_n.value[static_cast<size_t>(c)];
        // Reductions over the channel slice.
        real sum_dy = 0, sum_dy_xhat = 0;
        for (Index b = 0; b < batch; ++b) {
          const real* x = in.value.data() + (b * ch + c) * spatial;
          const real* dy = self.grad.data() + (b * ch + c) * spatial;
          for (Index i = 0; i < spatial; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (x[i] - m) * is;
          }
        }
        if (shift_n.requires_grad) shift_n.grad[static_cast<size_t>(c)] += sum_dy;
        if (scale_n.requires_grad) scale_n.grad[static_cast<size_t>(c)] += sum_dy_xhat;
        if (!in.requires_grad) continue;
        if (train) {
          const real inv_n = real(1) / static_cast<real>(n_reduce);
          for (Index b = 0; b < batch; ++b) {
            const real* x = in.value.data() + (b * ch + c) * spatial;
            const real* dy = self.grad.data() + (b * ch + c) * spatial;
            real* dx = in.grad.data() + (b * ch + c) * spatial;
            for (Index i = 0; i < spatial; ++i) {
              real xhat = (x[i] - m) * is;
              dx[i] += sc * is * (dy[i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
            }
          }
        } else {
          for (Index b = 0; b < batch; ++b) {
            const real* dy = self.grad.data() + (b * ch + c) * spatial;
            real* dx = in.grad.data() + (b * ch + c) * spatial;
            for (Index i = 0; i < spatial; ++i) dx[i] += sc * is * dy[i];
          }
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- activations ------------------------------------------------------------------

ActKind act_kind_from_string(const std::string& s) {
  if (s == "none") return ActKind::None;
  if (s == "softplus") return ActKind::Softplus;
  if (s == "relu") return ActKind::Relu;
  if (s == "softmax") return ActKind::Softmax;
  if (s == "normalized_softplus") return ActKind::NormalizedSoftplus;
  throw ConfigError(strfmt("unknown activation '%s'", s.c_str()));
}

std::string to_string(ActKind kind) {
  switch (kind) {
    case ActKind::None: return "none";
    case ActKind::Softplus: return "softplus";
    case ActKind::Relu: return "relu";
    case ActKind::Softmax: return "softmax";
    case ActKind::NormalizedSoftplus: return "normalized_softplus";
  }
  return "?";
}

static Tensor relu(const Tensor& a) {
  auto n = detail::make_node(a.shape(), {a.node()}, "relu");
  const real* av = a.values().data();
  const Index count = static_cast<Index>(n->value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
  for (Index i = 0; i < count; ++i) n->value[i] = av[i] > 0 ? av[i] : real(0);
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      const Index count = static_cast<Index>(self.value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
      for (Index i = 0; i < count; ++i)
        if (pa.value[i] > 0) pa.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(std::move(n));
}

// Normalizing activations work on slices along `axis`.
template <class SliceFwd, class SliceBwd>
static Tensor axis_op(const Tensor& a, Index axis, const char* name, SliceFwd fwd, SliceBwd bwd) {
  if (axis < 0 || axis >= a.rank())
    throw ShapeError(strfmt("%s: axis %lld out of range for shape %s", name,
                            static_cast<long long>(axis), shape_str(a.shape()).c_str()));
  Index n_axis = a.dim(axis);
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= a.dim(d);
  for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);

  auto node = detail::make_node(a.shape(), {a.node()}, name);
  const real* av = a.values().data();
#pragma omp parallel for schedule(static) collapse(2)
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      Index base = o * n_axis * inner + i;
      fwd(av, node->value.data(), base, inner, n_axis);
    }

  if (node->requires_grad) {
    node->backprop = [outer, inner, n_axis, bwd](Node& self) {
      Node& pa = *self.parents[0];
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) {
          Index base = o * n_axis * inner + i;
          bwd(pa.value.data(), self.value.data(), self.grad.data(), pa.grad.data(), base, inner,
              n_axis);
        }
    };
  }
  return Tensor::wrap(std::move(node));
}

static Tensor softmax(const Tensor& a, Index axis) {
  Tensor out = axis_op(
      a, axis, "softmax",
      [](const real* x, real* y, Index base, Index stride, Index n) {
        real mx = -std::numeric_limits<real>::infinity();
        for (Index c = 0; c < n; ++c) mx = std::max(mx, x[base + c * stride]);
        real z = 0;
        for (Index c = 0; c < n; ++c) {
          real e = std::exp(x[base + c * stride] - mx);
          y[base + c * stride] = e;
          z += e;
        }
        for (Index c = 0; c < n; ++c) y[base + c * stride] /= z;
      },
      [](const real*, const real* y, const real* dy, real* dx, Index base, Index stride, Index n) {
        real dot = 0;
        for (Index c = 0; c < n; ++c) dot += dy[base + c * stride] * y[base + c * stride];
        for (Index c = 0; c < n; ++c) {
          Index k = base + c * stride;
          dx[k] += y[k] * (dy[k] - dot);
        }
      });
  return out;
}

// Spatial softmax/normalized-softplus slabs (class stride > 1) stream along
// the inner axis with vectorized math instead of per-slice scalar loops.
using Arr = Eigen::Array<real, Eigen::Dynamic, 1>;

template <bool kSoftplusKind>
static Tensor normalizing_fast(const Tensor& a, Index axis) {
  const Index n_axis = a.dim(axis);
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= a.dim(d);
  for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);

  auto node = detail::make_node(a.shape(), {a.node()},
                                kSoftplusKind ? "normalized_softplus" : "softmax");
  constexpr Index kBlock = 16384;
  const real* av = a.values().data();
  for (Index o = 0; o < outer; ++o) {
    const Index base = o * n_axis * inner;
#pragma omp parallel for schedule(static)
    for (Index i0 = 0; i0 < inner; i0 += kBlock) {
      const Index m = std::min(kBlock, inner - i0);
      Arr z = Arr::Zero(m);
      if constexpr (kSoftplusKind) {
        for (Index c = 0; c < n_axis; ++c) {
          Eigen::Map<const Arr> x(av + base + c * inner + i0, m);
          Eigen::Map<Arr> y(node->value.data() + base + c * inner + i0, m);
          Arr e = (-x.abs()).exp();
          y = x.max(real(0)) + (e < real(1e-8)).select(e, (real(1) + e).log());
          z += y;
        }
      } else {
        Arr mx = Arr::Constant(m, -std::numeric_limits<real>::infinity());
        for (Index c = 0; c < n_axis; ++c) {
          Eigen::Map<const Arr> x(av + base + c * inner + i0, m);
          mx = mx.max(x);
        }
        for (Index c = 0; c < n_axis; ++c) {
          Eigen::Map<const Arr> x(av + base + c * inner + i0, m);
          Eigen::Map<Arr> y(node->value.data() + base + c * inner + i0, m);
          y = (x - mx).exp();
          z += y;
        }
      }
      for (Index c = 0; c < n_axis; ++c) {
        Eigen::Map<Arr> y(node->value.data() + base + c * inner + i0, m);
        y /= z;
      }
    }
  }

  if (node->requires_grad) {
    node->backprop = [n_axis, outer, inner](Node& self) {
      Node& pa = *self.parents[0];
      constexpr Index kBlock = 16384;
      for (Index o = 0; o < outer; ++o) {
        const Index base = o * n_axis * inner;
#pragma omp parallel for schedule(static)
        for (Index i0 = 0; i0 < inner; i0 += kBlock) {
          const Index m = std::min(kBlock, inner - i0);
          Arr dot = Arr::Zero(m);
          for (Index c = 0; c < n_axis; ++c) {
            Eigen::Map<const Arr> y(self.value.data() + base + c * inner + i0, m);
            Eigen::Map<const Arr> dy(self.grad.data() + base + c * inner + i0, m);
            dot += y * dy;
          }
          if constexpr (kSoftplusKind) {
            // y = s/S: recover S from any class via s_c = softplus(x_c)
            Arr s_total = Arr::Zero(m);
            {
              Eigen::Map<const Arr> x0(pa.value.data() + base + i0, m);
              Eigen::Map<const Arr> y0(self.value.data() + base + i0, m);
              Arr e0 = (-x0.abs()).exp();
              s_total = (x0.max(real(0)) +
                         (e0 < real(1e-8)).select(e0, (real(1) + e0).log())) /
                        y0;
            }
            for (Index c = 0; c < n_axis; ++c) {
              Eigen::Map<const Arr> x(pa.value.data() + base + c * inner + i0, m);
              Eigen::Map<const Arr> dy(self.grad.data() + base + c * inner + i0, m);
              Eigen::Map<Arr> dx(pa.grad.data() + base + c * inner + i0, m);
              dx += (dy - dot) / s_total / (real(1) + (-x).exp());
            }
          } else {
            for (Index c = 0; c < n_axis; ++c) {
              Eigen::Map<const Arr> y(self.value.data() + base + c * inner + i0, m);
              Eigen::Map<const Arr> dy(self.grad.data() + base + c * inner + i0, m);
              Eigen::Map<Arr> dx(pa.grad.data() + base + c * inner + i0, m);
              dx += y * (dy - dot);
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

static Tensor normalized_softplus(const Tensor& a, Index axis) {
  return axis_op(
      a, axis, "normalized_softplus",
      [](const real* x, real* y, Index base, Index stride, Index n) {
        real z = 0;
        for (Index c = 0; c < n; ++c) {
          Index k = base + c * stride;
          real v = x[k];
          real s = std::max(v, real(0)) + std::log1p(std::exp(-std::abs(v)));
          y[k] = s;
          z += s;
        }
        for (Index c = 0; c < n; ++c) y[base + c * stride] /= z;
      },
      [](const real* x, const real* y, const real* dy, real* dx, Index base, Index stride,
         Index n) {
        // y = s/S with s = softplus(x): dL/ds_c = (dy_c - sum_j dy_j y_j)/S.
        real s_total = 0, dot = 0;
        for (Index c = 0; c < n; ++c) {
          Index k = base + c * stride;
          real v = x[k];
          s_total += std::max(v, real(0)) + std::log1p(std::exp(-std::abs(v)));
          dot += dy[k] * y[k];
        }
        for (Index c = 0; c < n; ++c) {
          Index k = base + c * stride;
          real sig = real(1) / (real(1) + std::exp(-x[k]));
          dx[k] += (dy[k] - dot) / s_total * sig;
        }
      });
}

Tensor activation(ActKind kind, const Tensor& input, Index axis) {
  Index inner = 1;
  for (Index d = axis + 1; d < input.rank(); ++d) inner *= input.dim(d);
  switch (kind) {
    case ActKind::None: return input;
    case ActKind::Softplus: return softplus(input);
    case ActKind::Relu: return relu(input);
    case ActKind::Softmax:
      if (axis >= 0 && axis < input.rank() && inner >= 64)
        return normalizing_fast<false>(input, axis);
      return softmax(input, axis);
    case ActKind::NormalizedSoftplus:
      if (axis >= 0 && axis < input.rank() && inner >= 64)
        return normalizing_fast<true>(input, axis);
      return normalized_softplus(input, axis);
  }
  throw ContractError("activation: unreachable");
}

// --- dense ------------------------------------------------------------------------

Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 2)
    throw ShapeError(strfmt("dense: input must be [batch, features], got %s",
                            shape_str(input.shape()).c_str()));
  if (weights.rank() != 2 || weights.dim(0) != input.dim(1))
    throw ShapeError(strfmt("dense: weight shape %s does not chain with input %s",
                            shape_str(weights.shape()).c_str(),
                            shape_str(input.shape()).c_str()));
  const Index B = input.dim(0), F = input.dim(1), U = weights.dim(1);
  if (bias.shape() != Shape{U})
    throw ShapeError(strfmt("dense: bias shape %s, expected [%lld]",
                            shape_str(bias.shape()).c_str(), static_cast<long long>(U)));

  auto node = detail::make_node({B, U}, {input.node(), weights.node(), bias.node()}, "dense");
  Map<const EMatRM> x(input.values().data(), B, F);
  Map<const EMatRM> w(weights.values().data(), F, U);
  Map<const Eigen::Matrix<real, Eigen::Dynamic, 1>> bv(bias.values().data(), U);
  EMat tmp(B, U);  // col-major GEMM destination, copied out afterwards
#pragma omp parallel for schedule(static)
  for (Index r0 = 0; r0 < B; r0 += kGemmBlock) {
    const Index rn = std::min(kGemmBlock, B - r0);
    tmp.block(r0, 0, rn, U).noalias() = x.middleRows(r0, rn) * w;
  }
  Map<EMatRM> out(node->value.data(), B, U);
  out = tmp;
  out.rowwise() += bv.transpose();

  if (node->requires_grad) {
    node->backprop = [B, F, U](Node& self) {
      Node& in = *self.parents[0];
      Node& w_n = *self.parents[1];
      Node& b_n = *self.parents[2];
      Map<const EMatRM> dout(self.grad.data(), B, U);
      if (in.requires_grad) {
        Map<const EMatRM> w(w_n.value.data(), F, U);
        EMat tmp(B, F);
#pragma omp parallel for schedule(static)
        for (Index r0 = 0; r0 < B; r0 += kGemmBlock) {
          const Index rn = std::min(kGemmBlock, B - r0);
          tmp.block(r0, 0, rn, F).noalias() = dout.middleRows(r0, rn) * w.transpose();
        }
        Map<EMatRM> din(in.grad.data(), B, F);
        din += tmp;
      }
      if (w_n.requires_grad) {
        Map<const EMatRM> x(in.value.data(), B, F);
        EMat tmp(F, U);
        const Index f_block = std::max<Index>(Index(1), (F + 1) / 2);
#pragma omp parallel for schedule(static)
        for (Index f0 = 0; f0 < F; f0 += f_block) {
          const Index fn = std::min(f_block, F - f0);
          tmp.block(f0, 0, fn, U).noalias() = x.middleCols(f0, fn).transpose() * dout;
        }
        Map<EMatRM> dw(w_n.grad.data(), F, U);
        dw += tmp;
      }
      if (b_n.requires_grad) {
        Map<Eigen::Matrix<real, Eigen::Dynamic, 1>> db(b_n.grad.data(), U);
        db.noalias() += dout.colwise().sum().transpose();
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- concat -----------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 2)
    throw ShapeError(strfmt("concat: rank mismatch %s vs %s", shape_str(a.shape()).c_str(),
                            shape_str(b.shape()).c_str()));
  for (Index d = 0; d < a.rank(); ++d)
    if (d != 1 && a.dim(d) != b.dim(d))
      throw ShapeError(strfmt("concat: axis %lld mismatch %s vs %s", static_cast<long long>(d),
                              shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));

  const Index batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Index spatial = 1;
  for (Index d = 2; d < a.rank(); ++d) spatial *= a.dim(d);

  Shape out_shape = a.shape();
  out_shape[1] = ca + cb;
  auto node = detail::make_node(std::move(out_shape), {a.node(), b.node()}, "concat");
  for (Index bi = 0; bi < batch; ++bi) {
    real* dst = node->value.data() + bi * (ca + cb) * spatial;
    std::memcpy(dst, a.values().data() + bi * ca * spatial,
                static_cast<size_t>(ca * spatial) * sizeof(real));
    std::memcpy(dst + ca * spatial, b.values().data() + bi * cb * spatial,
                static_cast<size_t>(cb * spatial) * sizeof(real));
  }

  if (node->requires_grad) {
    node->backprop = [batch, ca, cb, spatial](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      for (Index bi = 0; bi < batch; ++bi) {
        const real* src = self.grad.data() + bi * (ca + cb) * spatial;
        if (pa.requires_grad) {
          real* g = pa.grad.data() + bi * ca * spatial;
          for (Index i = 0; i < ca * spatial; ++i) g[i] += src[i];
        }
        if (pb.requires_grad) {
          real* g = pb.grad.data() + bi * cb * spatial;
          for (Index i = 0; i < cb * spatial; ++i) g[i] += src[ca * spatial + i];
        }
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace bcnn
