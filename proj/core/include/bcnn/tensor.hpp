#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bcnn/errors.hpp"
#include "bcnn/rng.hpp"

namespace bcnn {

#ifdef BCNN_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
// Recycling arena for tensor buffers. Keeps graph allocations warm across
// training steps instead of paying page faults on every fresh mapping.
void* pool_alloc(std::size_t bytes);
void pool_free(void* p, std::size_t bytes) noexcept;
}  // namespace detail

// 64-byte-aligned pooled storage: fixed alignment keeps vectorized math
// kernels on the same scalar/SIMD split for every allocation, so repeated
// forwards are bit-identical; pooling avoids per-step page-fault churn.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(detail::pool_alloc(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { detail::pool_free(p, n * sizeof(T)); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using RealVec = std::vector<real, AlignedAllocator<real>>;

namespace detail {

struct Node {
  Shape shape;
  RealVec value;
  RealVec grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backprop;
  const char* op = "leaf";

  bool is_leaf() const { return !backprop; }
};

}  // namespace detail

// N-dimensional row-major array with optional reverse-mode gradient
// tracking. Cheap to copy (shared handle); values are written only at
// creation and, for parameters, by the optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real v, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<real> v, bool requires_grad = false);
  static Tensor scalar(real v, bool requires_grad = false);
  static Tensor uniform(Shape shape, real lo, real hi, RngStream& rng, bool requires_grad = false);
  static Tensor normal(Shape shape, real mean, real stddev, RngStream& rng,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape[static_cast<size_t>(i)]; }
  Index size() const { return static_cast<Index>(node_->value.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const real> values() const { return node_->value; }
  std::span<real> values_mut() { return node_->value; }
  std::span<const real> grad() const;
  std::span<real> grad_mut();
  real item() const;

  void zero_grad();

  // Identity of the underlying node (used by optimizers as a stable key).
  const void* id() const { return node_.get(); }

  std::shared_ptr<detail::Node>& node() { return node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise graph ops (same-shape operands).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, real s);
Tensor mul_scalar(const Tensor& a, real s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
// ln(1 + e^x), evaluated as max(x,0) + log1p(e^-|x|) so it is finite for any x.
Tensor softplus(const Tensor& a);

// Full reduction to a scalar tensor.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Same data, new shape (element count must match).
Tensor reshape(const Tensor& a, Shape shape);

// Reverse-mode pass from a scalar loss. Populates grad on every reachable
// tensor with requires_grad. Leaf grads accumulate across calls; the loss
// node's grad equals 1 after each pass.
void backward(const Tensor& loss);

namespace detail {
// Allocates the result node for an op. requires_grad is inherited from parents.
std::shared_ptr<Node> make_node(Shape shape, std::vector<std::shared_ptr<Node>> parents,
                                const char* op);
}  // namespace detail

}  // namespace bcnn
