#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "patchgd/errors.hpp"
#include "patchgd/random.hpp"

namespace patchgd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Global gradient-recording switch (single-owner graphs; see concurrency note
// in the trainer). Z-filling and inference run under NoGradGuard.
namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated on first accumulation
  bool requires_grad = false;

  // Reverse-mode graph edge. backward_fn reads this node's grad and
  // accumulates into the parents' grads. Leaves have no parents.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }

  void accumulate_grad(std::size_t i, S g) {
    grad[i] += g;
  }
};

}  // namespace detail

// Dense n-dimensional array participating in a reverse-mode graph. Value
// semantics with shared storage: copying a Tensor aliases the same buffer.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Impl = detail::TensorImpl<S>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(Shape shape, S value, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values.assign(numel(t.impl_->shape), value);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<S> values,
                            bool requires_grad = false) {
    if (values.size() != numel(shape)) {
      throw ShapeError("from_values: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->values = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->values) v = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->values) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const S> values() const { return impl_->values; }
  // Mutable access to the raw buffer (parameter updates, data loading).
  // Must not be used on a tensor that is part of a pending graph.
  std::span<S> values_mut() { return impl_->values; }

  S value_at(std::size_t i) const { return impl_->values[i]; }
  S scalar() const {
    if (size() != 1) {
      throw ShapeError("scalar(): tensor has shape " + shape_str(shape()));
    }
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const S> grad() const {
    if (!has_grad()) throw StateError("grad(): no gradient present");
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) impl_->grad.clear();
  }

  // Same values, no gradient path to the producer.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->values = impl_->values;
    t.impl_->requires_grad = false;
    return t;
  }

  Tensor clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Reverse-mode sweep from a scalar. Visits each reachable node exactly once
  // in reverse topological order; gradients of fan-out nodes are summed.
  // Graph edges and intermediate grad buffers are released afterwards, so a
  // graph supports one backward pass.
  void backward() {
    if (!defined()) throw StateError("backward(): undefined tensor");
    if (size() != 1) {
      throw ValueError("backward(): loss must be scalar, got shape " +
                       shape_str(shape()));
    }
    if (!impl_->requires_grad) {
      throw StateError("backward(): tensor does not track gradients");
    }

    std::vector<Impl*> order;
    topo_order(order);

    impl_->ensure_grad();
    impl_->grad[0] = S(1);

    // Each backward_fn captures the input impls it differentiates with
    // respect to, checks requires_grad, and accumulates into their grads.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Impl* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }

    // Release the graph: edges, closures, and non-leaf grad buffers.
    for (Impl* node : order) {
      if (!node->is_leaf()) {
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
      node->parents.clear();
      node->backward_fn = nullptr;
    }
  }

  std::shared_ptr<Impl>& impl() { return impl_; }
  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  void topo_order(std::vector<Impl*>& order) const {
    std::unordered_set<Impl*> visited;
    // Iterative post-order DFS; deep graphs must not overflow the stack.
    std::vector<std::pair<Impl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        Impl* child = node->parents[next_child].get();
        ++next_child;
        if (visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Impl> impl_;
};

namespace detail {

// Builds an op result node. Graph edges are recorded only when gradient mode
// is on and some input tracks gradients.
template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> values,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(TensorImpl<S>&)> backward_fn) {
  Tensor<S> out = Tensor<S>::from_values(std::move(shape), std::move(values));
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    out.impl()->requires_grad = true;
    for (auto& in : inputs) {
      if (in.defined()) out.impl()->parents.push_back(in.impl());
    }
    out.impl()->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace detail

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace patchgd
