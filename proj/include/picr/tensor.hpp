// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace picr {

using Shape = std::vector<std::size_t>;

/// Allocator returning 64-byte aligned storage. Vectorized reductions then see
/// the same alignment on every run, which keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised when operands have incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorNode {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TensorNode&)> backward;

  Buffer& ensure_grad();
};

/// Dense row-major double tensor with reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Leaf tensors
/// created with `parameter()` accumulate gradients; results of operations
/// record their inputs while gradient mode is enabled.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, Buffer values);
  Tensor(Shape shape, const std::vector<double>& values);
  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), Buffer(values)) {}

  static Tensor parameter(Shape shape, Buffer values);
  static Tensor parameter(Shape shape, const std::vector<double>& values);
  static Tensor parameter(Shape shape, std::initializer_list<double> values) {
    return parameter(std::move(shape), Buffer(values));
  }
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const;
  bool requires_grad() const;
  void set_requires_grad(bool on);
  void zero_grad();

  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }

  /// Value copy detached from the graph.
  Tensor detach() const;
  /// Same storage viewed under a different shape; gradients flow through.
  Tensor reshape(Shape shape) const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, Buffer, const std::vector<Tensor>&,
                            std::function<void(TensorNode&)>);

  std::shared_ptr<TensorNode> node_;
};

/// Builds an operation result. The backward closure is attached only when
/// gradient mode is on and at least one input requires a gradient.
Tensor make_result(Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                   std::function<void(TensorNode&)> backward);
Tensor make_result(Shape shape, const std::vector<double>& value, const std::vector<Tensor>& inputs,
                   std::function<void(TensorNode&)> backward);

/// Runs reverse accumulation from a scalar root (seed gradient 1).
void backward(const Tensor& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace picr
