// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Dense row-major tensors with a recorded reverse-mode graph.
//
// A Tensor is a shared handle onto a node. Ops build new nodes and, when any
// input requires a gradient (and grad mode is on), link the inputs and a
// backward rule. backward() walks the nodes reachable from a scalar loss in
// reverse topological order.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dssdrv/error.hpp"

namespace dssdrv {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

inline thread_local bool grad_mode_enabled = true;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads node.grad and accumulates into node.inputs[i]->grad.
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode() { return detail::grad_mode_enabled; }

template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Node = detail::TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    DSSDRV_CHECK(shape_numel(shape) == static_cast<std::int64_t>(data.size()), ShapeError,
                 "tensor data length ", data.size(), " does not match shape ", shape_str(shape));
    for (auto d : shape) DSSDRV_CHECK(d >= 0, ShapeError, "negative extent in ", shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), requires_grad);
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    DSSDRV_CHECK(numel() == 1, ShapeError, "item() on tensor of shape ", shape_str(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  // Copy of the values with no graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  const std::string& op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T& x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Builds the result node of an op. The backward rule is only attached when
// recording is enabled and at least one input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(detail::TensorNode<T>&)> backward) {
  check_finite(data, op);
  Tensor<T> out(std::move(shape), std::move(data), false);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto& node = *out.node();
  node.op = op;
  if (needs) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.node());
    node.backward = std::move(backward);
  }
  return out;
}

// Topologically ordered record of the operations that produced a tensor.
template <typename T>
class Graph {
 public:
  using Node = detail::TensorNode<T>;

  static Graph trace(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<const Node*> visited;
    // Iterative post-order DFS; input order is fixed so the walk is deterministic.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  std::size_t size() const { return order_.size(); }
  // Inputs precede the nodes that consume them.
  const std::vector<Node*>& nodes() const { return order_; }

  std::size_t num_ops() const {
    std::size_t n = 0;
    for (auto* node : order_) n += node->is_leaf() ? 0 : 1;
    return n;
  }

 private:
  std::vector<Node*> order_;
};

// Populates .grad on every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls; intermediate gradients are released.
template <typename T>
void backward(const Tensor<T>& loss) {
  DSSDRV_CHECK(loss.numel() == 1, ShapeError, "backward() needs a scalar loss, got ",
               shape_str(loss.shape()));
  DSSDRV_CHECK(loss.requires_grad(), ShapeError,
               "backward() on a tensor with no recorded graph (no input requires grad)");
  auto graph = Graph<T>::trace(loss);
  auto& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);
  const auto& order = graph.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf() || !node->backward) continue;
    if (node->grad.empty()) continue;
    for (auto& in : node->inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    node->backward(*node);
    if (node != &root) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

}  // namespace dssdrv
