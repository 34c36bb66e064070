// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dmnn/rng.hpp"

namespace dmnn {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Raised on dimension mismatches; the message names the offending dimension.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::uint64_t order = 0;  // creation index; a valid topological order
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates input gradients into pg[i] (nullptr when parent i needs none).
  std::function<void(const std::vector<T>& gout, const std::vector<std::vector<T>*>& pg)>
      backward;
};

inline std::uint64_t next_node_order() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph construction in its scope (evaluation passes).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense row-major tensor with optional reverse-mode gradient tracking.
/// Copies are shallow handles onto a shared node.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T v) {
    Tensor t;
    t.n_ = std::make_shared<detail::Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value.assign(static_cast<std::size_t>(shape_numel(t.n_->shape)), v);
    t.n_->order = detail::next_node_order();
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("tensor: value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.n_ = std::make_shared<detail::Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(values);
    t.n_->order = detail::next_node_order();
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool valid() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }

  std::vector<T>& values() { return n_->value; }
  const std::vector<T>& values() const { return n_->value; }
  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  T& operator[](std::int64_t i) { return n_->value[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return n_->value[static_cast<std::size_t>(i)]; }

  /// Multi-index accessor for tests and small reads.
  T at(std::initializer_list<int> idx) const {
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (int i : idx) {
      flat = flat * n_->shape[k] + i;
      ++k;
    }
    return n_->value[static_cast<std::size_t>(flat)];
  }

  bool requires_grad() const { return n_ && n_->requires_grad; }

  /// Marks a leaf as trainable and allocates its gradient accumulator.
  Tensor& set_requires_grad(bool rg = true) {
    if (rg && n_->backward) {
      throw std::runtime_error("set_requires_grad: only leaf tensors can be retagged");
    }
    n_->requires_grad = rg;
    if (rg) {
      n_->grad.assign(n_->value.size(), T(0));
    } else {
      n_->grad.clear();
      n_->grad.shrink_to_fit();
    }
    return *this;
  }

  std::vector<T>& grad() {
    if (!n_->requires_grad) throw std::runtime_error("grad: tensor does not track gradients");
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    if (!n_->requires_grad) throw std::runtime_error("grad: tensor does not track gradients");
    return n_->grad;
  }

  void zero_grad() {
    if (n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  /// Value copy detached from the graph.
  Tensor detach() const {
    Tensor t;
    t.n_ = std::make_shared<detail::Node<T>>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    t.n_->order = detail::next_node_order();
    return t;
  }

  Tensor clone() const { return detach(); }

  /// Reverse-mode sweep from a scalar. Gradients are accumulated (+=) into
  /// every reachable requires_grad tensor; repeated calls add up.
  void backward() const {
    if (!n_) throw std::runtime_error("backward: empty tensor");
    if (numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(n_->shape));
    }
    if (!n_->requires_grad) {
      throw std::runtime_error("backward: loss does not require grad");
    }

    // Reachable requires_grad subgraph, then reverse creation order.
    std::vector<detail::Node<T>*> order;
    {
      std::unordered_map<detail::Node<T>*, bool> seen;
      std::vector<detail::Node<T>*> stack{n_.get()};
      seen[n_.get()] = true;
      while (!stack.empty()) {
        auto* node = stack.back();
        stack.pop_back();
        order.push_back(node);
        for (const auto& p : node->parents) {
          if (p && p->requires_grad && !seen[p.get()]) {
            seen[p.get()] = true;
            stack.push_back(p.get());
          }
        }
      }
    }
    std::sort(order.begin(), order.end(),
              [](const auto* a, const auto* b) { return a->order > b->order; });

    // Pass-local buffers keep this sweep independent of previously
    // accumulated .grad contents.
    std::unordered_map<detail::Node<T>*, std::vector<T>> buf;
    buf.reserve(order.size());
    buf[n_.get()] = {T(1)};

    std::vector<std::vector<T>*> pg;
    for (auto* node : order) {
      auto it = buf.find(node);
      if (it == buf.end()) continue;
      if (!node->backward) continue;
      pg.clear();
      pg.reserve(node->parents.size());
      for (const auto& p : node->parents) {
        if (p && p->requires_grad) {
          auto& slot = buf[p.get()];
          if (slot.empty()) slot.assign(p->value.size(), T(0));
          pg.push_back(&slot);
        } else {
          pg.push_back(nullptr);
        }
      }
      node->backward(it->second, pg);
    }

    for (auto& [node, g] : buf) {
      if (!node->requires_grad) continue;
      if (node->grad.size() != node->value.size()) node->grad.assign(node->value.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
    }
  }

  std::shared_ptr<detail::Node<T>> node() const { return n_; }

  /// Builds an op result node. Falls back to a plain leaf when gradient
  /// tracking is off or no parent participates in the graph.
  template <class Fn>
  static Tensor make_op(Shape shape, std::vector<T> value, std::vector<Tensor> parents, Fn&& fn) {
    Tensor t = from(std::move(shape), std::move(value));
    bool track = grad_enabled();
    if (track) {
      bool any = false;
      for (const auto& p : parents) any = any || p.requires_grad();
      track = any;
    }
    if (track) {
      t.n_->requires_grad = true;
      t.n_->grad.assign(t.n_->value.size(), T(0));
      t.n_->parents.reserve(parents.size());
      for (const auto& p : parents) t.n_->parents.push_back(p.node());
      t.n_->backward = std::forward<Fn>(fn);
    }
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> n_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace dmnn
