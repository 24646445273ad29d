#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its inputs and a
// backward closure. Calling backward() on a scalar walks the recorded graph
// once in reverse topological order and accumulates into leaf gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dsat {

// ---------------------------------------------------------------------------
// Errors. The CLI maps these onto exit codes.
// ---------------------------------------------------------------------------

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  for (auto e : shape)
    if (e <= 0) throw DimensionError("non-positive extent in shape " + to_string(shape));
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording for its lifetime (inference, key encoders).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode_enabled() { return detail::grad_enabled; }

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    check_shape(shape);
    if (dsat::numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    check_shape(shape);
    auto n = static_cast<std::size_t>(dsat::numel(shape));
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += rank();
    return node_->shape.at(static_cast<std::size_t>(i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // Writes bypass the graph; only meant for leaves (optimizer, checkpoint load).
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }
  const char* op_name() const { return node_->op; }

  /// Same values, no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  Tensor clone(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <class T>
void Tensor<T>::backward() const {
  if (!defined()) throw std::logic_error("backward() on undefined tensor");
  if (numel() != 1)
    throw DimensionError("backward() requires a scalar loss, got shape " + to_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: each node appears once, after all its parents.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      auto* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    if (n->grad.empty()) continue;  // no upstream contribution
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

namespace detail {

/// Builds an op result. When recording is on and any input needs a gradient,
/// the result keeps its inputs as parents and the given backward closure.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || (in && in->defined() && in->requires_grad());
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  n.op = op;
  for (const auto* in : inputs) {
    // Undefined optional inputs (e.g. no bias) keep their slot as a null-data leaf.
    if (in && in->defined())
      n.parents.push_back(in->node());
    else
      n.parents.push_back(std::make_shared<Node<T>>());
  }
  n.backward = std::move(backward);
  return out;
}

/// Gradient buffer of parent i if it participates in differentiation.
template <class T>
std::vector<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return &p.ensure_grad();
}

}  // namespace detail

template <class T, class U>
Tensor<T> tensor_cast(const Tensor<U>& x, bool requires_grad = false) {
  std::vector<T> out(x.data().begin(), x.data().end());
  return Tensor<T>(x.shape(), std::move(out), requires_grad);
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

}  // namespace dsat
