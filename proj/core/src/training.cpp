#include "bcnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "bcnn/csvio.hpp"

namespace bcnn {

using detail::Node;

static constexpr real kProbFloor = real(1e-12);

Tensor cross_entropy(const Tensor& probs, const std::vector<std::int32_t>& targets,
                     const std::vector<std::uint8_t>& mask) {
  if (probs.rank() < 2)
    throw ShapeError(strfmt("cross_entropy: probs must be [batch, classes, ...], got %s",
                            shape_str(probs.shape()).c_str()));
  const Index B = probs.dim(0), C = probs.dim(1);
  Index inner = 1;
  for (Index d = 2; d < probs.rank(); ++d) inner *= probs.dim(d);
  const Index elements = B * inner;
  if (static_cast<Index>(targets.size()) != elements)
    throw ShapeError(strfmt("cross_entropy: %zu targets for %lld elements", targets.size(),
                            static_cast<long long>(elements)));
  if (!mask.empty() && static_cast<Index>(mask.size()) != elements)
    throw ShapeError("cross_entropy: mask length mismatch");

  auto element_live = [&](Index e) {
    if (!mask.empty() && !mask[static_cast<size_t>(e)]) return false;
    return targets[static_cast<size_t>(e)] != kIgnoreLabel;
  };

  auto node = detail::make_node(Shape{}, {probs.node()}, "cross_entropy");
  const real* pv = probs.values().data();
  double acc = 0;
  Index count = 0;
  for (Index e = 0; e < elements; ++e) {
    if (!element_live(e)) continue;
    std::int32_t t = targets[static_cast<size_t>(e)];
    if (t < 0 || t >= C)
      throw ContractError(strfmt("cross_entropy: target %d out of range [0, %lld) at element %lld",
                                 t, static_cast<long long>(C), static_cast<long long>(e)));
    Index b = e / inner, i = e % inner;
    real p = pv[(b * C + t) * inner + i];
    acc += -std::log(std::max(p, kProbFloor));
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: mask excludes every element");
  node->value[0] = static_cast<real>(acc / static_cast<double>(count));

  if (node->requires_grad) {
    auto targets_copy = std::make_shared<std::vector<std::int32_t>>(targets);
    auto mask_copy = std::make_shared<std::vector<std::uint8_t>>(mask);
    node->backprop = [targets_copy, mask_copy, B, C, inner, count](Node& self) {
      Node& p = *self.parents[0];
      const real g = self.grad[0] / static_cast<real>(count);
      const Index elements = B * inner;
      for (Index e = 0; e < elements; ++e) {
        if (!mask_copy->empty() && !(*mask_copy)[static_cast<size_t>(e)]) continue;
        std::int32_t t = (*targets_copy)[static_cast<size_t>(e)];
        if (t == kIgnoreLabel) continue;
        Index b = e / inner, i = e % inner;
        size_t k = static_cast<size_t>((b * C + t) * inner + i);
        // -1/p composes with the upstream softmax Jacobian to the bounded
        // (p - onehot) form even when p is deeply saturated; clamping the
        // denominator at the loss floor would zero the recovery gradient.
        p.grad[k] += -g / std::max(p.value[k], std::numeric_limits<real>::min());
      }
    };
  }
  return Tensor::wrap(std::move(node));
}

// --- Adam ------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw ContractError("adam: parameter without gradient tracking");
    m_.emplace_back(static_cast<size_t>(p.size()), real(0));
    v_.emplace_back(static_cast<size_t>(p.size()), real(0));
  }
}

void AdamOptimizer::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void AdamOptimizer::step() {
  ++step_;
  const real bc1 = real(1) - std::pow(cfg_.beta1, static_cast<real>(step_));
  const real bc2 = real(1) - std::pow(cfg_.beta2, static_cast<real>(step_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    auto vals = params_[pi].values_mut();
    auto grads = params_[pi].grad();
    real* m = m_[pi].data();
    real* v = v_[pi].data();
    for (size_t i = 0; i < vals.size(); ++i) {
      const real g = grads[i];
      m[i] = cfg_.beta1 * m[i] + (real(1) - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (real(1) - cfg_.beta2) * g * g;
      const real mhat = m[i] / bc1;
      const real vhat = v[i] / bc2;
      vals[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (cfg_.weight_decay != real(0)) vals[i] -= cfg_.lr * cfg_.weight_decay * vals[i];
    }
  }
}

void AdamOptimizer::save(std::ostream& out) const {
  std::uint64_t step = static_cast<std::uint64_t>(step_), n = m_.size();
  out.write(reinterpret_cast<const char*>(&step), sizeof(step));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (size_t i = 0; i < m_.size(); ++i) {
    std::uint64_t len = m_[i].size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(reinterpret_cast<const char*>(m_[i].data()),
              static_cast<std::streamsize>(len * sizeof(real)));
    out.write(reinterpret_cast<const char*>(v_[i].data()),
              static_cast<std::streamsize>(len * sizeof(real)));
  }
}

void AdamOptimizer::load(std::istream& in) {
  std::uint64_t step = 0, n = 0;
  in.read(reinterpret_cast<char*>(&step), sizeof(step));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || n != m_.size()) throw IoError("adam state: parameter count mismatch");
  for (size_t i = 0; i < m_.size(); ++i) {
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len != m_[i].size()) throw IoError("adam state: moment size mismatch");
    in.read(reinterpret_cast<char*>(m_[i].data()),
            static_cast<std::streamsize>(len * sizeof(real)));
    in.read(reinterpret_cast<char*>(v_[i].data()),
            static_cast<std::streamsize>(len * sizeof(real)));
  }
  if (!in) throw IoError("adam state: truncated");
  step_ = static_cast<Index>(step);
}

// --- epoch loop -------------------------------------------------------------------

Batch gather_batch(const Dataset& data, const std::vector<Index>& indices) {
  Batch batch;
  const Index per = data.elements_per_sample();
  const Index row = data.inputs.size() / std::max<Index>(data.sample_count(), 1);
  Shape shape = data.inputs.shape();
  shape[0] = static_cast<Index>(indices.size());
  std::vector<real> vals(static_cast<size_t>(numel(shape)));
  batch.targets.resize(indices.size() * static_cast<size_t>(per));
  if (!data.mask.empty()) batch.mask.resize(batch.targets.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const Index src = indices[i];
    std::memcpy(vals.data() + static_cast<Index>(i) * row,
                data.inputs.values().data() + src * row, static_cast<size_t>(row) * sizeof(real));
    std::copy_n(data.labels.begin() + src * per, per,
                batch.targets.begin() + static_cast<Index>(i) * per);
    if (!data.mask.empty())
      std::copy_n(data.mask.begin() + src * per, per,
                  batch.mask.begin() + static_cast<Index>(i) * per);
  }
  batch.inputs = Tensor::from_values(std::move(shape), std::move(vals));
  return batch;
}

static void accumulate_accuracy(const Tensor& probs, const Batch& batch, Index& correct,
                                Index& total) {
  const Index B = probs.dim(0), C = probs.dim(1);
  Index inner = 1;
  for (Index d = 2; d < probs.rank(); ++d) inner *= probs.dim(d);
  const real* pv = probs.values().data();
  for (Index e = 0; e < B * inner; ++e) {
    if (!batch.mask.empty() && !batch.mask[static_cast<size_t>(e)]) continue;
    std::int32_t t = batch.targets[static_cast<size_t>(e)];
    if (t == kIgnoreLabel) continue;
    Index b = e / inner, i = e % inner;
    Index best = 0;
    real best_p = pv[(b * C) * inner + i];
    for (Index c = 1; c < C; ++c) {
      real p = pv[(b * C + c) * inner + i];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    correct += best == t;
    ++total;
  }
}

EpochStats train_epoch(Network& net, const Dataset& data, Index batch_size, real beta,
                       AdamOptimizer& opt, std::uint64_t run_seed, Index epoch) {
  data.validate();
  const Index N = data.sample_count();
  if (N == 0) throw ConfigError("train_epoch: empty dataset");
  if (batch_size < 1) throw ConfigError("train_epoch: batch_size must be >= 1");

  std::vector<Index> perm(static_cast<size_t>(N));
  std::iota(perm.begin(), perm.end(), Index(0));
  RngStream shuffle_rng =
      RngStream::derive(run_seed, {rng_tag::kShuffle, static_cast<std::uint64_t>(epoch)});
  for (size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[shuffle_rng.next_index(i)]);

  const Index n_batches = (N + batch_size - 1) / batch_size;
  const bool bayes = net.spec().mode == NetworkMode::Bayesian;

  EpochStats stats;
  Index correct = 0, total = 0;
  for (Index bi = 0; bi < n_batches; ++bi) {
    const Index lo = bi * batch_size;
    const Index hi = std::min(lo + batch_size, N);
    Batch batch = gather_batch(data, {perm.begin() + lo, perm.begin() + hi});

    opt.zero_grad();
    Tensor objective;
    if (bayes) {
      RngStream sample_rng = RngStream::derive(
          run_seed,
          {rng_tag::kTrainSample, static_cast<std::uint64_t>(epoch),
           static_cast<std::uint64_t>(bi)});
      ComplexityTerms terms;
      Tensor out = net.forward(batch.inputs, WeightMode::Sample, &sample_rng, true, &terms);
      Tensor nll = cross_entropy(out, batch.targets, batch.mask);
      FreeEnergyTerms fe{terms.log_q, terms.log_prior, nll, beta, n_batches};
      objective = free_energy(fe);
      stats.nll += nll.item();
      stats.complexity += objective.item() - nll.item();
      accumulate_accuracy(out, batch, correct, total);
    } else {
      Tensor out = net.forward(batch.inputs, WeightMode::Mean, nullptr, true);
      objective = cross_entropy(out, batch.targets, batch.mask);
      stats.nll += objective.item();
      accumulate_accuracy(out, batch, correct, total);
    }
    stats.loss += objective.item();
    backward(objective);
    opt.step();
  }

  stats.loss /= static_cast<double>(n_batches);
  stats.nll /= static_cast<double>(n_batches);
  stats.complexity /= static_cast<double>(n_batches);
  stats.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  stats.batches = n_batches;
  return stats;
}

void append_epoch_metrics(const std::string& csv_path, Index epoch, const std::string& split,
                          const EpochStats& stats) {
  csv::append_row(csv_path,
                  {"epoch", "split", "loss", "complexity_term", "nll_term", "accuracy"},
                  {std::to_string(epoch), split, csv::num(stats.loss),
                   csv::num(stats.complexity), csv::num(stats.nll), csv::num(stats.accuracy)});
}

}  // namespace bcnn
