#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gamreid/error.hpp"

namespace gamreid {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Ordered record of differentiable operations executed on this thread.
/// Operations append their result node after their inputs exist, so the
/// record is already in topological order and backward walks it in reverse.
template <std::floating_point T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  void record(NodePtr node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Drops every recorded node and severs its graph links.
  void clear() {
    for (auto& n : nodes_) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.clear();
    }
    nodes_.clear();
  }

  const std::vector<NodePtr>& nodes() const { return nodes_; }

 private:
  Tape() = default;
  std::vector<NodePtr> nodes_;
  bool enabled_ = true;
};

/// Disables recording for its lifetime (inference, bank refreshes, finite
/// differences).
template <std::floating_point T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape<T>::current().enabled()) {
    Tape<T>::current().set_enabled(false);
  }
  ~NoGradGuard() { Tape<T>::current().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor. Copies share storage (handle semantics), which is
/// what lets a parameter participate in several graph nodes; use clone() for
/// an independent copy.
template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape) require(e > 0, ErrorKind::shape, "tensor extents must be positive, got " + shape_str(shape));
    require(numel_of(shape) == data.size(), ErrorKind::shape,
            "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static BasicTensor full(Shape shape, T value) {
    const auto n = numel_of(shape);
    return BasicTensor(std::move(shape), std::vector<T>(n, value));
  }

  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node().shape; }
  std::size_t dim() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const { return node().data.size(); }

  std::span<T> data() { return node().data; }
  std::span<const T> data() const { return node().data; }
  std::vector<T>& storage() { return node().data; }
  const std::vector<T>& storage() const { return node().data; }

  T item() const {
    require(numel() == 1, ErrorKind::usage, "item() on tensor with " + std::to_string(numel()) + " elements");
    return node().data[0];
  }

  T& operator[](std::size_t i) { return node().data[i]; }
  T operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    node().requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node().is_leaf; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad_buffer(); }
  void zero_grad() { node().grad.clear(); }

  /// Independent copy of the values, detached from any graph.
  BasicTensor clone() const { return BasicTensor(shape(), node().data); }

  /// Same storage semantics as clone(); never requires grad.
  BasicTensor detach() const { return clone(); }

  const NodePtr& node_ptr() const { return node_; }

 private:
  detail::Node<T>& node() const {
    if (!node_) [[unlikely]]
      fail(ErrorKind::usage, "use of an undefined tensor");
    return *node_;
  }

  NodePtr node_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

/// Builds the output of a differentiable op. `backward` receives the output
/// node (whose grad is populated) and must accumulate into the inputs'
/// grad buffers; it is only attached when recording is on and some input
/// requires grad.
template <std::floating_point T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(detail::Node<T>&)> backward) {
#ifndef NDEBUG
  for (const auto& v : data) assert(std::isfinite(v) && "non-finite value produced by forward op");
#endif
  BasicTensor<T> out(std::move(shape), std::move(data));
  auto& tape = Tape<T>::current();
  if (!tape.enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return out;
  auto& node = *out.node_ptr();
  node.requires_grad = true;
  node.is_leaf = false;
  for (const auto& in : inputs) {
    if (in.defined()) node.parents.push_back(in.node_ptr());
  }
  node.backward = std::move(backward);
  tape.record(out.node_ptr());
  return out;
}

/// Reverse-mode pass from a scalar loss. Gradients accumulate on every
/// requires_grad leaf; the tape is cleared afterwards.
template <std::floating_point T>
void backward(BasicTensor<T>& loss) {
  require(loss.numel() == 1, ErrorKind::usage,
          "backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  require(loss.requires_grad(), ErrorKind::usage, "backward on a tensor that does not require grad");
  auto& tape = Tape<T>::current();
  loss.mutable_grad()[0] += T(1);
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
  tape.clear();
}

/// Accumulates `g` into a parent's grad if the parent participates.
template <std::floating_point T>
inline std::vector<T>* grad_sink(const std::shared_ptr<detail::Node<T>>& parent) {
  if (!parent || !parent->requires_grad) return nullptr;
  return &parent->grad_buffer();
}

}  // namespace gamreid
