// SPDX-License-Identifier: Apache-2.0
#include "picr/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace picr {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Buffer& TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, const std::vector<double>& values)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(Shape shape, Buffer values) : node_(std::make_shared<TensorNode>()) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::parameter(Shape shape, const std::vector<double>& values) {
  return parameter(std::move(shape), Buffer(values.begin(), values.end()));
}

Tensor Tensor::parameter(Shape shape, Buffer values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, Buffer{v}); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape().size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!node_) return {};
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) return {};
  return node_->value;
}

std::span<const double> Tensor::grad() const {
  if (!node_) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value); }

Tensor Tensor::reshape(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw ShapeError("reshape " + shape_string(shape()) + " -> " + shape_string(new_shape));
  }
  return make_result(std::move(new_shape), node_->value, {*this}, [](TensorNode& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor make_result(Shape shape, const std::vector<double>& value, const std::vector<Tensor>& inputs,
                   std::function<void(TensorNode&)> backward_fn) {
  return make_result(std::move(shape), Buffer(value.begin(), value.end()), inputs, std::move(backward_fn));
}

Tensor make_result(Shape shape, Buffer value, const std::vector<Tensor>& inputs,
                   std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw ShapeError("backward() needs a scalar root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS yields a topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Intermediate gradients from an earlier pass over a shared graph are stale.
  for (TensorNode* node : order) {
    if (node->backward) std::fill(node->grad.begin(), node->grad.end(), 0.0);
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

}  // namespace picr
