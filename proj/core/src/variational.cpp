#include "bcnn/variational.hpp"

#include <cmath>
#include <numbers>

namespace bcnn {

using detail::Node;

static constexpr real kHalfLog2Pi = real(0.5) * real(1.8378770664093454836L);  // ln(2*pi)

Prior Prior::cauchy(real gamma) {
  Prior p;
  p.kind = PriorKind::Cauchy;
  p.cauchy_gamma = gamma;
  p.validate();
  return p;
}

Prior Prior::gaussian(real sigma) {
  Prior p;
  p.kind = PriorKind::Gaussian;
  p.gaussian_sigma = sigma;
  p.validate();
  return p;
}

Prior Prior::gaussian_mixture(real alpha, real sigma0, real sigma1) {
  Prior p;
  p.kind = PriorKind::GaussianMixture;
  p.mix_alpha = alpha;
  p.mix_sigma0 = sigma0;
  p.mix_sigma1 = sigma1;
  p.validate();
  return p;
}

void Prior::validate() const {
  switch (kind) {
    case PriorKind::Cauchy:
      if (!(cauchy_gamma > 0)) throw ConfigError("prior: Cauchy scale must be > 0");
      break;
    case PriorKind::Gaussian:
      if (!(gaussian_sigma > 0)) throw ConfigError("prior: Gaussian sigma must be > 0");
      break;
    case PriorKind::GaussianMixture:
      if (!(mix_sigma0 > 0) || !(mix_sigma1 > 0))
        throw ConfigError("prior: mixture sigmas must be > 0");
      if (mix_alpha < 0 || mix_alpha > 1)
        throw ConfigError("prior: mixture alpha must be in [0, 1]");
      break;
  }
}

std::string Prior::describe() const {
  switch (kind) {
    case PriorKind::Cauchy: return strfmt("Cauchy(%g)", double(cauchy_gamma));
    case PriorKind::Gaussian: return strfmt("Gaussian(%g)", double(gaussian_sigma));
    case PriorKind::GaussianMixture:
      return strfmt("GaussianMixture(%g,%g,%g)", double(mix_alpha), double(mix_sigma0),
                    double(mix_sigma1));
  }
  return "?";
}

real rho_for_sigma(real sigma0) {
  if (!(sigma0 > 0)) throw ConfigError(strfmt("sigma0 must be > 0, got %g", double(sigma0)));
  // rho = ln(e^sigma0 - 1); for large sigma0 the subtraction is negligible.
  if (sigma0 > real(30)) return sigma0;
  return std::log(std::expm1(sigma0));
}

VariationalParam init_variational(const Shape& shape, Index kernel_extent, int dims, real sigma0,
                                  RngStream& rng) {
  if (kernel_extent < 1 || dims < 1)
    throw ConfigError("init_variational: kernel extent and dims must be >= 1");
  real bound = std::pow(static_cast<real>(kernel_extent), -static_cast<real>(dims) / real(2));
  VariationalParam vp;
  vp.mu = Tensor::uniform(shape, -bound, bound, rng, /*requires_grad=*/true);
  vp.rho = Tensor::full(shape, rho_for_sigma(sigma0), /*requires_grad=*/true);
  return vp;
}

Tensor draw_eps(const Shape& shape, RngStream& rng) {
  return Tensor::normal(shape, real(0), real(1), rng);
}

Tensor sample_weights(const VariationalParam& vp, const Tensor& eps) {
  if (eps.shape() != vp.mu.shape())
    throw ShapeError(strfmt("sample_weights: eps shape %s != parameter shape %s",
                            shape_str(eps.shape()).c_str(), shape_str(vp.mu.shape()).c_str()));
  return add(vp.mu, mul(softplus(vp.rho), eps));
}

Tensor log_variational_posterior(const Tensor& w, const VariationalParam& vp) {
  if (w.shape() != vp.mu.shape())
    throw ShapeError("log_variational_posterior: shape mismatch");
  Tensor sigma = softplus(vp.rho);
  Tensor z = div(sub(w, vp.mu), sigma);
  Tensor s = add(sum(log(sigma)), mul_scalar(sum(square(z)), real(0.5)));
  return add_scalar(neg(s), -kHalfLog2Pi * static_cast<real>(w.size()));
}

// log(alpha N(w;0,s0) + (1-alpha) N(w;0,s1)) summed over elements, with the
// per-element log-sum evaluated in stable form. Fused node with analytic
// gradient via component responsibilities.
static Tensor log_gaussian_mixture(const Tensor& w, real alpha, real s0, real s1) {
  auto node = detail::make_node(Shape{}, {w.node()}, "log_gauss_mixture");
  const real la = std::log(alpha);
  const real l1a = std::log(real(1) - alpha);
  const real* wv = w.values().data();
  real acc = 0;
  for (size_t i = 0; i < w.values().size(); ++i) {
    real x = wv[i];
    real a = la - kHalfLog2Pi - std::log(s0) - x * x / (2 * s0 * s0);
    real b = l1a - kHalfLog2Pi - std::log(s1) - x * x / (2 * s1 * s1);
    real m = std::max(a, b);
    acc += m + std::log1p(std::exp(std::min(a, b) - m));
  }
  node->value[0] = acc;
  if (node->requires_grad) {
    node->backprop = [alpha, s0, s1, la, l1a](Node& self) {
      Node& pw = *self.parents[0];
      const real g = self.grad[0];
      for (size_t i = 0; i < pw.value.size(); ++i) {
        real x = pw.value[i];
        real a = la - kHalfLog2Pi - std::log(s0) - x * x / (2 * s0 * s0);
        real b = l1a - kHalfLog2Pi - std::log(s1) - x * x / (2 * s1 * s1);
        real m = std::max(a, b);
        real lse = m + std::log1p(std::exp(std::min(a, b) - m));
        real r0 = std::exp(a - lse);
        pw.grad[i] += g * (r0 * (-x / (s0 * s0)) + (real(1) - r0) * (-x / (s1 * s1)));
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

Tensor log_prior(const Tensor& w, const Prior& prior) {
  prior.validate();
  const real n = static_cast<real>(w.size());
  switch (prior.kind) {
    case PriorKind::Gaussian: {
      real s = prior.gaussian_sigma;
      Tensor quad = mul_scalar(sum(square(w)), -real(1) / (2 * s * s));
      return add_scalar(quad, -n * (kHalfLog2Pi + std::log(s)));
    }
    case PriorKind::Cauchy: {
      real g = prior.cauchy_gamma;
      // sum of -ln(pi*g) - ln(1 + (w/g)^2)
      Tensor t = log(add_scalar(square(mul_scalar(w, real(1) / g)), real(1)));
      return add_scalar(neg(sum(t)), -n * std::log(std::numbers::pi_v<real> * g));
    }
    case PriorKind::GaussianMixture: {
      if (prior.mix_alpha >= 1) return log_prior(w, Prior::gaussian(prior.mix_sigma0));
      if (prior.mix_alpha <= 0) return log_prior(w, Prior::gaussian(prior.mix_sigma1));
      return log_gaussian_mixture(w, prior.mix_alpha, prior.mix_sigma0, prior.mix_sigma1);
    }
  }
  throw ContractError("log_prior: unreachable");
}

Tensor free_energy(const FreeEnergyTerms& terms) {
  if (terms.n_batches < 1) throw ConfigError("free_energy: n_batches must be >= 1");
  if (terms.beta < 0) throw ConfigError("free_energy: beta must be >= 0");
  real scale = terms.beta / static_cast<real>(terms.n_batches);
  return add(mul_scalar(sub(terms.log_q, terms.log_prior), scale), terms.nll);
}

}  // namespace bcnn
