#pragma once

// Define-by-run reverse-mode autodiff over dense row-major tensors.
//
// Every operation returns a fresh Tensor whose node remembers its inputs and a
// backward rule. Graphs live as long as the loss tensor holds them and are
// released by backward(). Parameters are leaf tensors that outlive graphs and
// accumulate gradients until zero_grad().

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "photobridge/errors.hpp"

namespace photobridge::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <std::floating_point T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in scope (evaluation, inference, FD oracles).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(shape_size(shape), T{0});
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape_size(shape)) {
      throw DimensionError("Tensor::from: data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  // Mutable access is for leaves only (parameter updates, fixture setup).
  std::span<T> mutable_data() const {
    if (!node_->is_leaf) throw ContractError("mutable_data on non-leaf tensor '" + node_->op + "'");
    return node_->value;
  }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Zeros when backward has not reached this tensor.
  std::vector<T> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<T>(size(), T{0});
  }
  void zero_grad() const { node_->grad.clear(); }

  const std::string& op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Fresh leaf with a copy of the values (no history).
  Tensor detach(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

  template <std::floating_point U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> v(node_->value.begin(), node_->value.end());
    return Tensor<U>::from(shape(), std::move(v), requires_grad);
  }

 private:
  NodePtr node_;
};

// Topologically ordered operation records reachable from a root. Built by a
// post-order DFS, so inputs always precede their consumers.
template <std::floating_point T>
class Graph {
 public:
  static Graph from(const Tensor<T>& root) {
    Graph g;
    std::unordered_set<const Node<T>*> seen;
    // Iterative DFS: deep transformer graphs overflow recursion otherwise.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  const std::vector<Node<T>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

// Populates grads of every requires_grad leaf reachable from `loss`, then
// releases the graph. A second call on the same loss is a contract error.
template <std::floating_point T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto& root = *loss.node();
  if (root.consumed) throw ContractError("backward: graph already consumed; rebuild the forward pass first");
  if (!root.requires_grad) {
    root.consumed = true;
    return;
  }
  const Graph<T> graph = Graph<T>::from(loss);
  root.ensure_grad()[0] += T{1};
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward_fn && n.grad.size() == n.value.size()) n.backward_fn(n);
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf) {
      n->backward_fn = nullptr;
      n->inputs.clear();
      n->consumed = true;
    }
  }
  root.consumed = true;
}

namespace detail {

template <std::floating_point T>
void check_finite(const std::string& op, const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(x)) throw NumericError(op + ": produced non-finite value");
  }
}

// Wraps a forward result into a graph node. `rule` receives the output node
// and must accumulate into the inputs' grads (only those requiring grad).
template <std::floating_point T, class Rule>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs, Rule&& rule) {
  check_finite(op, value);
  auto n = std::make_shared<Node<T>>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backward_fn = std::forward<Rule>(rule);
  }
  return Tensor<T>(std::move(n));
}

template <std::floating_point T>
Tensor<T> make_result_vec(std::string op, Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                          std::function<void(Node<T>&)> rule) {
  check_finite(op, value);
  auto n = std::make_shared<Node<T>>();
  n->op = std::move(op);
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node());
    n->backward_fn = std::move(rule);
  }
  return Tensor<T>(std::move(n));
}

// Gradient sink for input k of a node, or nullptr if it does not need one.
template <std::floating_point T>
std::vector<T>* grad_of(Node<T>& out, std::size_t k) {
  auto& in = *out.inputs[k];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

}  // namespace detail

// Forward-freeze tape used by the finite-difference oracle. While recording,
// stop_gradient and straight-through ops log the values they treat as
// constants; while replaying, perturbed evaluations reuse those values so the
// oracle differentiates exactly the path reverse mode differentiates.
template <std::floating_point T>
class FreezeTape {
 public:
  enum class Mode { off, record, replay };

  static FreezeTape& current() {
    thread_local FreezeTape tape;
    return tape;
  }

  Mode mode() const { return mode_; }
  void start_recording() {
    mode_ = Mode::record;
    values_.clear();
    cursor_ = 0;
  }
  void start_replay() {
    mode_ = Mode::replay;
    cursor_ = 0;
  }
  void stop() { mode_ = Mode::off; }

  // Records v, or returns the recorded value in its place.
  std::vector<T> freeze(const std::vector<T>& v) {
    if (mode_ == Mode::record) {
      values_.push_back(v);
      return v;
    }
    if (mode_ == Mode::replay) {
      if (cursor_ >= values_.size()) throw ContractError("FreezeTape: replay ran past recorded values");
      return values_[cursor_++];
    }
    return v;
  }

 private:
  Mode mode_ = Mode::off;
  std::vector<std::vector<T>> values_;
  std::size_t cursor_ = 0;
};

template <std::floating_point T>
class FreezeScope {
 public:
  explicit FreezeScope(bool replay) {
    auto& tape = FreezeTape<T>::current();
    replay ? tape.start_replay() : tape.start_recording();
  }
  ~FreezeScope() { FreezeTape<T>::current().stop(); }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;
};

}  // namespace photobridge::ad
