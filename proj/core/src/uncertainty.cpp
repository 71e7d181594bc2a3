#include "bcnn/uncertainty.hpp"

#include <cmath>

namespace bcnn {

void PredictionSet::validate() const {
  if (T < 1) throw ContractError("prediction set: T must be >= 1");
  if (C < 2) throw ContractError("prediction set: C must be >= 2");
  if (static_cast<Index>(probs.size()) != T * E * C)
    throw ShapeError(strfmt("prediction set: %zu probabilities for T=%lld E=%lld C=%lld",
                            probs.size(), static_cast<long long>(T), static_cast<long long>(E),
                            static_cast<long long>(C)));
  if (static_cast<Index>(labels.size()) != E)
    throw ShapeError("prediction set: label count does not match element count");
  if (!eval_mask.empty() && static_cast<Index>(eval_mask.size()) != E)
    throw ShapeError("prediction set: eval mask length mismatch");
  if (!dist_to_surface.empty() && static_cast<Index>(dist_to_surface.size()) != E)
    throw ShapeError("prediction set: distance field length mismatch");
  for (Index t = 0; t < T; ++t)
    for (Index e = 0; e < E; ++e) {
      real s = 0;
      for (Index c = 0; c < C; ++c) {
        real p = prob(t, e, c);
        if (p < 0)
          throw NumericError(strfmt("prediction set: negative probability at t=%lld e=%lld",
                                    static_cast<long long>(t), static_cast<long long>(e)));
        s += p;
      }
      if (std::abs(s - real(1)) > real(1e-6))
        throw NumericError(strfmt("prediction set: probabilities sum to %g at t=%lld e=%lld",
                                  double(s), static_cast<long long>(t),
                                  static_cast<long long>(e)));
    }
}

MeanPrediction predictive_mean(const PredictionSet& ps) {
  MeanPrediction out;
  out.mean.assign(static_cast<size_t>(ps.E * ps.C), real(0));
  out.label.resize(static_cast<size_t>(ps.E));
  const real inv_t = real(1) / static_cast<real>(ps.T);
#pragma omp parallel for schedule(static)
  for (Index e = 0; e < ps.E; ++e) {
    real* m = out.mean.data() + e * ps.C;
    for (Index t = 0; t < ps.T; ++t)
      for (Index c = 0; c < ps.C; ++c) m[c] += ps.prob(t, e, c);
    Index best = 0;
    for (Index c = 0; c < ps.C; ++c) {
      m[c] *= inv_t;
      if (m[c] > m[best]) best = c;  // strict: ties keep the lowest index
    }
    out.label[static_cast<size_t>(e)] = static_cast<std::int32_t>(best);
  }
  return out;
}

static real xlogx(real p) { return p > 0 ? p * std::log(p) : real(0); }

EntropyResult predictive_entropy(const PredictionSet& ps) {
  EntropyResult out;
  out.per_class.assign(static_cast<size_t>(ps.E * ps.C), real(0));
  out.of_mean.assign(static_cast<size_t>(ps.E), real(0));
  const real inv_t = real(1) / static_cast<real>(ps.T);
#pragma omp parallel for schedule(static)
  for (Index e = 0; e < ps.E; ++e) {
    real* h = out.per_class.data() + e * ps.C;
    for (Index t = 0; t < ps.T; ++t)
      for (Index c = 0; c < ps.C; ++c) h[c] -= xlogx(ps.prob(t, e, c));
    real hm = 0;
    for (Index c = 0; c < ps.C; ++c) {
      real m = 0;
      for (Index t = 0; t < ps.T; ++t) m += ps.prob(t, e, c);
      hm -= xlogx(m * inv_t);
    }
    out.of_mean[static_cast<size_t>(e)] = hm;
  }
  return out;
}

std::vector<real> aleatoric(const PredictionSet& ps) {
  std::vector<real> out(static_cast<size_t>(ps.E * ps.C * ps.C), real(0));
  const real inv_t = real(1) / static_cast<real>(ps.T);
#pragma omp parallel for schedule(static)
  for (Index e = 0; e < ps.E; ++e) {
    real* m = out.data() + e * ps.C * ps.C;
    for (Index t = 0; t < ps.T; ++t)
      for (Index i = 0; i < ps.C; ++i) {
        const real pi = ps.prob(t, e, i);
        m[i * ps.C + i] += pi;
        for (Index j = 0; j < ps.C; ++j) m[i * ps.C + j] -= pi * ps.prob(t, e, j);
      }
    for (Index k = 0; k < ps.C * ps.C; ++k) m[k] *= inv_t;
  }
  return out;
}

std::vector<real> epistemic(const PredictionSet& ps) {
  std::vector<real> out(static_cast<size_t>(ps.E * ps.C * ps.C), real(0));
  const real inv_t = real(1) / static_cast<real>(ps.T);
#pragma omp parallel for schedule(static)
  for (Index e = 0; e < ps.E; ++e) {
    real* m = out.data() + e * ps.C * ps.C;
    std::vector<real> mean(static_cast<size_t>(ps.C), real(0));
    for (Index t = 0; t < ps.T; ++t)
      for (Index c = 0; c < ps.C; ++c) mean[static_cast<size_t>(c)] += ps.prob(t, e, c);
    for (real& v : mean) v *= inv_t;
    for (Index t = 0; t < ps.T; ++t)
      for (Index i = 0; i < ps.C; ++i) {
        const real di = ps.prob(t, e, i) - mean[static_cast<size_t>(i)];
        for (Index j = 0; j < ps.C; ++j)
          m[i * ps.C + j] += di * (ps.prob(t, e, j) - mean[static_cast<size_t>(j)]);
      }
    for (Index k = 0; k < ps.C * ps.C; ++k) m[k] *= inv_t;
  }
  return out;
}

std::vector<ElementRecord> summarize(const PredictionSet& ps) {
  ps.validate();
  MeanPrediction mp = predictive_mean(ps);
  EntropyResult ent = predictive_entropy(ps);
  std::vector<real> alea = aleatoric(ps);
  std::vector<real> epis = epistemic(ps);

  std::vector<ElementRecord> out(static_cast<size_t>(ps.E));
#pragma omp parallel for schedule(static)
  for (Index e = 0; e < ps.E; ++e) {
    ElementRecord& r = out[static_cast<size_t>(e)];
    const Index l = mp.label[static_cast<size_t>(e)];
    r.id = e;
    r.true_label = ps.labels[static_cast<size_t>(e)];
    r.predicted = static_cast<std::int32_t>(l);
    r.mean_score = mp.mean[static_cast<size_t>(e * ps.C + l)];
    r.entropy_paper = ent.per_class[static_cast<size_t>(e * ps.C + l)];
    r.entropy_mean = ent.of_mean[static_cast<size_t>(e)];
    r.aleatoric_diag = alea[static_cast<size_t>((e * ps.C + l) * ps.C + l)];
    r.epistemic_diag = epis[static_cast<size_t>((e * ps.C + l) * ps.C + l)];
    r.dist_to_surface =
        ps.dist_to_surface.empty() ? -1.0f : ps.dist_to_surface[static_cast<size_t>(e)];
    r.evaluated = ps.eval_mask.empty() || ps.eval_mask[static_cast<size_t>(e)] != 0;
  }
  return out;
}

}  // namespace bcnn
