#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "etm/core/tensor.hpp"

namespace ETM_NS {

/// One vertex of the dynamic reverse-mode graph. Leaves have no backward function.
struct Node {
  Tensor value;
  Tensor grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor& grad_buffer();
  bool has_grad() const noexcept { return !grad.empty(); }
};

/// Handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false, std::string name = {});
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Trainable leaf.
  static Var parameter(Tensor value, std::string name);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// In-place access to a leaf's value (optimizers, loaders).
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::int64_t numel() const { return node_->value.numel(); }
  const std::string& name() const { return node_->name; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->has_grad(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }

  /// Backpropagate from a single-element result.
  void backward() const;

  /// New leaf holding a copy of the value, outside any graph.
  Var detach() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Records an op result. When gradients are disabled or no input needs them,
/// the inputs and backward function are dropped.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace etm
