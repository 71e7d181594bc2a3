#pragma once

#include <string>

#include "bcnn/tensor.hpp"

namespace bcnn {

// Per-weight posterior parameters theta = (mu, rho); the standard deviation
// is sigma = ln(1 + e^rho), always positive.
struct VariationalParam {
  Tensor mu;
  Tensor rho;
};

enum class PriorKind { Cauchy, Gaussian, GaussianMixture };

// Zero-centered weight prior.
struct Prior {
  PriorKind kind = PriorKind::Cauchy;
  real cauchy_gamma = real(0.3);
  real gaussian_sigma = real(1);
  real mix_alpha = real(0.5);
  real mix_sigma0 = real(1);
  real mix_sigma1 = real(0.1);

  static Prior cauchy(real gamma);
  static Prior gaussian(real sigma);
  static Prior gaussian_mixture(real alpha, real sigma0, real sigma1);

  void validate() const;
  std::string describe() const;  // e.g. "Cauchy(0.3)"
};

// mu ~ U(-1/sqrt(k^d), 1/sqrt(k^d)); rho solves ln(1+e^rho) = sigma0.
// kernel_extent is the per-dimension kernel size k, dims the number of
// kernel dimensions d; dense layers pass (fan_in, 1).
VariationalParam init_variational(const Shape& shape, Index kernel_extent, int dims, real sigma0,
                                  RngStream& rng);

// Inverse of the softplus, stable over the full range.
real rho_for_sigma(real sigma0);

// Standard normal noise, not gradient-tracked.
Tensor draw_eps(const Shape& shape, RngStream& rng);

// w = mu + ln(1+e^rho) * eps, gradient-tracked through mu and rho.
Tensor sample_weights(const VariationalParam& vp, const Tensor& eps);

// Sum over weights of log N(w; mu, sigma^2), gradient-tracked.
Tensor log_variational_posterior(const Tensor& w, const VariationalParam& vp);

// Sum over weights of the prior log density, gradient-tracked w.r.t. w.
Tensor log_prior(const Tensor& w, const Prior& prior);

struct FreeEnergyTerms {
  Tensor log_q;
  Tensor log_prior;
  Tensor nll;
  real beta = real(1);
  Index n_batches = 1;
};

// (beta/n) * (log_q - log_prior) + nll.
Tensor free_energy(const FreeEnergyTerms& terms);

}  // namespace bcnn
