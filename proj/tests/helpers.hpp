#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bcnn/tensor.hpp"

namespace bcnn::test {

// Central finite differences against the analytic gradient of loss_fn.
// loss_fn must rebuild the graph from the current parameter values on every
// call. Returns the worst relative error over all checked elements.
inline double gradcheck(const std::vector<Tensor>& params,
                        const std::function<Tensor()>& loss_fn, double h = 1e-5,
                        double abs_floor = 1e-7) {
  Tensor loss = loss_fn();
  for (Tensor p : params) p.zero_grad();
  backward(loss);

  std::vector<std::vector<real>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto vals = p.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
      const real saved = vals[i];
      vals[i] = saved + static_cast<real>(h);
      double up = loss_fn().item();
      vals[i] = saved - static_cast<real>(h);
      double down = loss_fn().item();
      vals[i] = saved;
      double numeric = (up - down) / (2 * h);
      double a = analytic[pi][i];
      double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

inline Tensor random_tensor(Shape shape, RngStream& rng, real lo = -1, real hi = 1,
                            bool requires_grad = true) {
  return Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

// Scalar probe: fixed random weighting of all output elements, so every
// output contributes to the checked loss. The weights depend only on the
// output shape, so repeated calls inside a finite-difference loop see the
// same function.
inline Tensor probe_loss(const Tensor& out) {
  RngStream rng = RngStream::derive(0x5eed, {static_cast<std::uint64_t>(out.size())});
  Tensor w = Tensor::uniform(out.shape(), real(0.25), real(1), rng);
  return sum(mul(out, w));
}

}  // namespace bcnn::test
