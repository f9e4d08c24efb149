#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "megabyte/core.hpp"

namespace megabyte {

namespace detail {

struct Node {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs[i]->grad.
  std::function<void(Node&)> backward;

  std::vector<real>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), real(0));
    return grad;
  }
  bool is_leaf() const { return !backward; }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major array with an optional gradient accumulator. Copies share
// the underlying node; values are immutable after creation except through
// mutable_data() on leaves (optimizer updates) and grad accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
  }

  static Tensor full(Shape shape, real value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<real>(n, value), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<real> data, bool requires_grad = false) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                       " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(real value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const real> data() const { return node_->data; }
  std::span<real> mutable_data() { return node_->data; }
  real operator[](std::size_t i) const { return node_->data[i]; }

  real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when nothing has been accumulated yet.
  std::span<const real> grad() const { return node_->ensure_grad(); }
  std::span<real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // New leaf sharing no graph history; never receives gradient.
  Tensor detach() const { return from(shape(), node_->data, false); }

  void set_requires_grad(bool value) { node_->requires_grad = value; }

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<real>& v, const char* op) {
  for (real x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Wraps an op result, recording the backward closure only when some input
// needs gradient and recording is enabled.
inline Tensor make_result(const char* op, Shape shape, std::vector<real> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  check_finite(data, op);
  Tensor out = Tensor::from(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  }
  auto& node = *out.node();
  node.op = op;
  if (needs) {
    node.requires_grad = true;
    node.backward = std::move(backward);
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.defined() ? t.node() : nullptr);
  }
  return out;
}

// Gradient buffer of input i, or nullptr when that input takes no gradient.
inline real* input_grad(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return in->ensure_grad().data();
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate; the graph
// is released afterwards, so a second call on the same loss is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto root = loss.node();
  if (root->backward_done) throw Error("backward() called twice on the same graph");
  if (!root->requires_grad) throw Error("loss does not depend on any tensor requiring grad");

  // Iterative DFS post-order gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !child->is_leaf() && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  root->ensure_grad().assign(1, real(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->grad.empty()) node->backward(*node);
  }
  for (detail::Node* node : order) {
    node->backward = nullptr;
    node->inputs.clear();
    if (node != root.get()) node->grad.clear();
  }
  root->backward_done = true;
}

}  // namespace megabyte
