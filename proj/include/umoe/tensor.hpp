// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "umoe/common.hpp"

namespace umoe {

namespace detail {
inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}
}  // namespace detail

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Use clone() for an independent copy. Results of operations keep
/// their inputs alive until the result is released, so a graph lives exactly
/// as long as the tensors that reference it.
template <class T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
  };

  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_->data.assign(numel(shape), T(0));
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  static Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = false) {
    auto n = numel(shape);
    return from(std::move(shape), gaussian<T>(n, stddev, rng), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && size() > 0; }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  /// Independent copy of the values; the copy is a graph leaf.
  Tensor clone() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Same values, no history and no gradient tracking.
  Tensor detach() const {
    Tensor t = clone();
    t.node_->requires_grad = false;
    return t;
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable tensor that requires them.
  void backward() const {
    if (size() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;
    auto order = topo_order();
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->requires_grad && n->grad.size() == n->data.size()) n->backward_fn(*n);
    }
  }

  /// Builds the result of an operation and wires its backward closure when
  /// any parent needs gradients. The closure receives the result node and
  /// must only accumulate into parents that require grad.
  static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                            std::function<void(Node&)> backward_fn) {
    Tensor out = from(std::move(shape), std::move(data));
    if (detail::grad_disabled()) return out;
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const Tensor& p) { return p.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  // Parents-first ordering from an iterative DFS over parent lists. The
  // order depends only on graph structure, not on allocation or
  // construction order.
  std::vector<Node*> topo_order() const {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node> node_;
};

/// Gradient buffer of a parent node, allocated on first use.
template <class T>
std::vector<T>& grad_of(typename Tensor<T>::Node& n) {
  n.ensure_grad();
  return n.grad;
}

}  // namespace umoe
