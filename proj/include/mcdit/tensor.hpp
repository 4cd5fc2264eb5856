#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A tensor is a cheap handle onto a shared node. Every op whose inputs need
// gradients records its parents and a backward closure on the result node; the
// recorded nodes, topologically ordered from a scalar loss, form the tape that
// `backward` replays in reverse. Leaves created by the user (parameters,
// inputs) accumulate gradients; intermediate gradients live only for the
// duration of one backward pass.

#include <algorithm>
#include <cstring>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mcdit/errors.hpp"
#include "mcdit/rng.hpp"

namespace mcdit {

using Shape = std::vector<std::size_t>;

/// Value storage. Eigen's vectorised loops peel a different number of leading
/// elements depending on the address, which changes the summation order; with
/// packet-aligned buffers the result depends on the shape only.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace detail {

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

// grad_in[i] is null when parent i does not need a gradient.
template <class T>
using BackwardFn =
    std::function<void(const Node<T>& self, std::span<const T> grad_out, std::span<Buffer<T>* const> grad_in)>;

template <class T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  BackwardFn<T> backward;
  const char* op = "leaf";

  bool is_leaf() const { return parents.empty(); }
};

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  BasicTensor(Shape shape, std::initializer_list<T> data) : BasicTensor(std::move(shape), Buffer<T>(data)) {}
  BasicTensor(Shape shape, const std::vector<T>& data)
      : BasicTensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  BasicTensor(Shape shape, Buffer<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
    if (numel_of(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                           " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static BasicTensor full(Shape shape, T value) {
    const auto n = numel_of(shape);
    return BasicTensor(std::move(shape), Buffer<T>(n, value));
  }
  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Buffer<T> values(numel_of(shape));
    for (auto& v : values) v = static_cast<T>(rng.normal() * stddev);
    return BasicTensor(std::move(shape), std::move(values));
  }

  static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Buffer<T> values(numel_of(shape));
    for (auto& v : values) v = static_cast<T>(rng.uniform(lo, hi));
    return BasicTensor(std::move(shape), std::move(values));
  }

  static BasicTensor from_node(detail::NodePtr<T> node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  /// Writable view of the values. Only meaningful on leaves (parameters);
  /// mutating a recorded intermediate corrupts its consumers' gradients.
  std::span<T> mutable_data() { return node_->data; }
  const Buffer<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = flag;
  }
  bool is_leaf() const { return node_->is_leaf(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  /// Leaf copy of the values, cut from the graph.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }
  BasicTensor clone() const { return detach(); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
  }

  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

  const detail::NodePtr<T>& node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;

template <class T>
bool bit_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

template <class To, class From>
BasicTensor<To> cast(const BasicTensor<From>& x) {
  std::vector<To> out(x.numel());
  std::transform(x.data().begin(), x.data().end(), out.begin(), [](From v) { return static_cast<To>(v); });
  return BasicTensor<To>(x.shape(), std::move(out));
}

namespace detail {

template <class T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::vector<NodePtr<T>> parents, BackwardFn<T> backward,
                           const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool needs = grad_mode_enabled &&
                     std::any_of(parents.begin(), parents.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <class T>
std::vector<Node<T>*> topological_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

// Replays the tape below `root`, returning gradient buffers for leaves and
// for every node in `keep`.
template <class T>
std::unordered_map<Node<T>*, Buffer<T>> propagate(Node<T>* root, const std::unordered_set<Node<T>*>& keep) {
  std::unordered_map<Node<T>*, Buffer<T>> buffers;
  buffers[root] = Buffer<T>(root->data.size(), T(1));
  const auto order = topological_order(root);
  std::vector<Buffer<T>*> grad_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    auto found = buffers.find(node);
    if (found == buffers.end()) continue;
    if (!node->is_leaf()) {
      grad_in.assign(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        Node<T>* parent = node->parents[i].get();
        if (!parent->requires_grad) continue;
        auto& buf = buffers[parent];
        if (buf.empty()) buf.assign(parent->data.size(), T(0));
        grad_in[i] = &buf;
      }
      // grad_in may alias found->second only if a node is its own parent,
      // which the DAG construction rules out.
      node->backward(*node, buffers[node], grad_in);
      if (!keep.contains(node)) buffers.erase(node);
    }
  }
  return buffers;
}

}  // namespace detail

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient. Calling it twice without zeroing adds the gradients.
template <class T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto* root = loss.node().get();
  auto buffers = detail::propagate(root, {});
  for (auto& [node, buf] : buffers) {
    if (!node->is_leaf() || !node->requires_grad) continue;
    if (node->grad.empty()) {
      node->grad = std::move(buf);
    } else {
      for (std::size_t i = 0; i < buf.size(); ++i) node->grad[i] += buf[i];
    }
  }
}

/// Gradients of a scalar with respect to `inputs`, without touching any
/// accumulated `.grad` buffer. Unreachable inputs get zeros.
template <class T>
std::vector<BasicTensor<T>> gradients(const BasicTensor<T>& loss, const std::vector<BasicTensor<T>>& inputs) {
  if (loss.numel() != 1) throw ContractError("gradients requires a scalar loss, got " + shape_str(loss.shape()));
  std::vector<BasicTensor<T>> out;
  out.reserve(inputs.size());
  if (!loss.requires_grad()) {
    for (const auto& x : inputs) out.push_back(BasicTensor<T>::zeros(x.shape()));
    return out;
  }
  std::unordered_set<detail::Node<T>*> keep;
  for (const auto& x : inputs) keep.insert(x.node().get());
  auto buffers = detail::propagate(loss.node().get(), keep);
  for (const auto& x : inputs) {
    auto found = buffers.find(x.node().get());
    if (found == buffers.end() || found->second.empty()) {
      out.push_back(BasicTensor<T>::zeros(x.shape()));
    } else {
      out.emplace_back(x.shape(), found->second);
    }
  }
  return out;
}

}  // namespace mcdit
