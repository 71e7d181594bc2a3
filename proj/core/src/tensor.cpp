#include "bcnn/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <new>
#include <unordered_set>

namespace bcnn {

namespace detail {
namespace {

// Buffers bucket by exact byte size; the pool caps total held memory and
// releases the largest buffers first once over the cap.
struct BufferPool {
  std::mutex mu;
  std::multimap<std::size_t, void*> free_buffers;
  std::size_t held = 0;
  static constexpr std::size_t kMaxHeld = std::size_t(2) << 30;
  static constexpr std::size_t kAlign = 64;

  void* get(std::size_t bytes) {
    {
      std::lock_guard<std::mutex> lock(mu);
      auto it = free_buffers.find(bytes);
      if (it != free_buffers.end()) {
        void* p = it->second;
        free_buffers.erase(it);
        held -= bytes;
        return p;
      }
    }
    return ::operator new(bytes, std::align_val_t(kAlign));
  }

  void put(void* p, std::size_t bytes) noexcept {
    std::lock_guard<std::mutex> lock(mu);
    free_buffers.emplace(bytes, p);
    held += bytes;
    while (held > kMaxHeld && !free_buffers.empty()) {
      auto last = std::prev(free_buffers.end());
      ::operator delete(last->second, std::align_val_t(kAlign));
      held -= last->first;
      free_buffers.erase(last);
    }
  }
};

BufferPool& pool() {
  static BufferPool* p = new BufferPool();  // leaked on purpose: outlives statics
  return *p;
}

}  // namespace

void* pool_alloc(std::size_t bytes) { return pool().get(bytes); }
void pool_free(void* p, std::size_t bytes) noexcept { pool().put(p, bytes); }

}  // namespace detail

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

std::shared_ptr<Node> make_node(Shape shape, std::vector<std::shared_ptr<Node>> parents,
                                const char* op) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->requires_grad = false;
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(numel(n->shape)));
  if (n->requires_grad) n->grad.assign(n->value.size(), real(0));
  n->parents = std::move(parents);
  return n;
}

}  // namespace detail

using detail::Node;

static std::shared_ptr<Node> make_leaf(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(numel(n->shape)));
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->value.size(), real(0));
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return wrap(make_leaf(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, real v, bool requires_grad) {
  auto n = make_leaf(std::move(shape), requires_grad);
  std::fill(n->value.begin(), n->value.end(), v);
  return wrap(std::move(n));
}

Tensor Tensor::from_values(Shape shape, std::vector<real> v, bool requires_grad) {
  if (static_cast<Index>(v.size()) != numel(shape))
    throw ShapeError(strfmt("from_values: %zu values for shape %s", v.size(),
                            shape_str(shape).c_str()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(v.begin(), v.end());
  n->requires_grad = requires_grad;
  if (requires_grad) n->grad.assign(n->value.size(), real(0));
  return wrap(std::move(n));
}

Tensor Tensor::scalar(real v, bool requires_grad) {
  return from_values({}, {v}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, real lo, real hi, RngStream& rng, bool requires_grad) {
  auto n = make_leaf(std::move(shape), requires_grad);
  for (real& x : n->value) x = static_cast<real>(rng.uniform(lo, hi));
  return wrap(std::move(n));
}

Tensor Tensor::normal(Shape shape, real mean, real stddev, RngStream& rng, bool requires_grad) {
  auto n = make_leaf(std::move(shape), requires_grad);
  for (real& x : n->value) x = static_cast<real>(rng.normal(mean, stddev));
  return wrap(std::move(n));
}

std::span<const real> Tensor::grad() const {
  if (!node_->requires_grad)
    throw ContractError("grad() on a tensor without gradient tracking");
  return node_->grad;
}

std::span<real> Tensor::grad_mut() {
  if (!node_->requires_grad)
    throw ContractError("grad_mut() on a tensor without gradient tracking");
  return node_->grad;
}

real Tensor::item() const {
  if (size() != 1)
    throw ContractError(strfmt("item() on tensor of shape %s", shape_str(shape()).c_str()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), real(0));
}

// --- elementwise ops --------------------------------------------------------

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(strfmt("%s: shape mismatch %s vs %s", op, shape_str(a.shape()).c_str(),
                            shape_str(b.shape()).c_str()));
}

template <class Fwd, class Bwd>
static Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  check_same_shape(a, b, name);
  auto n = detail::make_node(a.shape(), {a.node(), b.node()}, name);
  const real* av = a.values().data();
  const real* bv = b.values().data();
  const std::int64_t count = static_cast<std::int64_t>(n->value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
  for (std::int64_t i = 0; i < count; ++i) n->value[i] = fwd(av[i], bv[i]);
  if (n->requires_grad) {
    n->backprop = [bwd](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const std::int64_t count = static_cast<std::int64_t>(self.value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
      for (std::int64_t i = 0; i < count; ++i) {
        auto [da, db] = bwd(pa.value[i], pb.value[i], self.value[i]);
        if (pa.requires_grad) pa.grad[i] += self.grad[i] * da;
        if (pb.requires_grad) pb.grad[i] += self.grad[i] * db;
      }
    };
  }
  return Tensor::wrap(std::move(n));
}

template <class Fwd, class Bwd>
static Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  auto n = detail::make_node(a.shape(), {a.node()}, name);
  const real* av = a.values().data();
  const std::int64_t count = static_cast<std::int64_t>(n->value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
  for (std::int64_t i = 0; i < count; ++i) n->value[i] = fwd(av[i]);
  if (n->requires_grad) {
    n->backprop = [bwd](Node& self) {
      Node& pa = *self.parents[0];
      const std::int64_t count = static_cast<std::int64_t>(self.value.size());
#pragma omp parallel for schedule(static) if (count > 16384)
      for (std::int64_t i = 0; i < count; ++i)
        pa.grad[i] += self.grad[i] * bwd(pa.value[i], self.value[i]);
    };
  }
  return Tensor::wrap(std::move(n));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "add", [](real x, real y) { return x + y; },
                   [](real, real, real) { return std::pair<real, real>(1, 1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "sub", [](real x, real y) { return x - y; },
                   [](real, real, real) { return std::pair<real, real>(1, -1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "mul", [](real x, real y) { return x * y; },
                   [](real x, real y, real) { return std::pair<real, real>(y, x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(a, b, "div", [](real x, real y) { return x / y; },
                   [](real x, real y, real) {
                     return std::pair<real, real>(real(1) / y, -x / (y * y));
                   });
}

Tensor neg(const Tensor& a) {
  return unary_op(a, "neg", [](real x) { return -x; }, [](real, real) { return real(-1); });
}

Tensor add_scalar(const Tensor& a, real s) {
  return unary_op(a, "add_scalar", [s](real x) { return x + s; },
                  [](real, real) { return real(1); });
}

Tensor mul_scalar(const Tensor& a, real s) {
  return unary_op(a, "mul_scalar", [s](real x) { return x * s; },
                  [s](real, real) { return s; });
}

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](real x) { return std::exp(x); },
                  [](real, real y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](real x) { return std::log(x); },
                  [](real x, real) { return real(1) / x; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](real x) { return x * x; },
                  [](real x, real) { return real(2) * x; });
}

Tensor softplus(const Tensor& a) {
  using Arr = Eigen::Array<real, Eigen::Dynamic, 1>;
  auto n = detail::make_node(a.shape(), {a.node()}, "softplus");
  const std::int64_t count = static_cast<std::int64_t>(n->value.size());
  constexpr std::int64_t kBlock = 65536;
#pragma omp parallel for schedule(static) if (count > 16384)
  for (std::int64_t i0 = 0; i0 < count; i0 += kBlock) {
    const std::int64_t m = std::min(kBlock, count - i0);
    Eigen::Map<const Arr> x(a.values().data() + i0, m);
    Eigen::Map<Arr> y(n->value.data() + i0, m);
    // log1p(e) ~= e below 1e-8 (both branches agree to ~5e-9 relative);
    // the split keeps the whole expression on vectorized exp/log.
    Arr e = (-x.abs()).exp();
    y = x.max(real(0)) + (e < real(1e-8)).select(e, (real(1) + e).log());
  }
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      const std::int64_t count = static_cast<std::int64_t>(self.value.size());
      constexpr std::int64_t kBlock = 65536;
#pragma omp parallel for schedule(static) if (count > 16384)
      for (std::int64_t i0 = 0; i0 < count; i0 += kBlock) {
        const std::int64_t m = std::min(kBlock, count - i0);
        Eigen::Map<const Arr> x(pa.value.data() + i0, m);
        Eigen::Map<const Arr> g(self.grad.data() + i0, m);
        Eigen::Map<Arr> dx(pa.grad.data() + i0, m);
        dx += g / (real(1) + (-x).exp());
      }
    };
  }
  return Tensor::wrap(std::move(n));
}

Tensor sum(const Tensor& a) {
  auto n = detail::make_node(Shape{}, {a.node()}, "sum");
  real acc = 0;
  for (real x : a.values()) acc += x;
  n->value[0] = acc;
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      const real g = self.grad[0];
      for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += g;
    };
  }
  return Tensor::wrap(std::move(n));
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), real(1) / static_cast<real>(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError(strfmt("reshape: %s has %lld elements, target %s has %lld",
                            shape_str(a.shape()).c_str(), static_cast<long long>(a.size()),
                            shape_str(shape).c_str(),
                            static_cast<long long>(numel(shape))));
  auto n = detail::make_node(std::move(shape), {a.node()}, "reshape");
  n->value.assign(a.node()->value.begin(), a.node()->value.end());
  if (n->requires_grad) {
    n->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    };
  }
  return Tensor::wrap(std::move(n));
}

// --- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError(strfmt("backward: loss must be scalar, got shape %s",
                               loss.defined() ? shape_str(loss.shape()).c_str() : "undefined"));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass scratch; leaf grads accumulate across passes.
  for (Node* n : order)
    if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), real(0));

  loss.node()->grad[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace bcnn
