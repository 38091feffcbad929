#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every op result records its parents and a vector-Jacobian closure when any
// input requires a gradient. backward() walks the reachable graph in reverse
// topological order exactly once; the recorded closures are released after
// the walk so a second call on the same loss is rejected.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <utility>
#include <vector>

namespace satkit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Gradient recording switch, per thread.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Worker count for row-parallel kernels. Work is split by rows only, so each
// output element keeps its serial summation order regardless of the setting.
inline std::atomic<int>& num_threads_setting() {
  static std::atomic<int> n{1};
  return n;
}
inline void set_num_threads(int n) { num_threads_setting() = std::max(1, n); }
inline int num_threads() { return num_threads_setting(); }

template <class F>
void parallel_rows(std::size_t rows, std::size_t work_per_row, F&& fn) {
  const int nt = num_threads();
  constexpr std::size_t kMinWork = 1 << 15;
  if (nt <= 1 || rows < 2 || rows * work_per_row < kMinWork) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t parts = std::min<std::size_t>(static_cast<std::size_t>(nt), rows);
  std::vector<std::thread> pool;
  pool.reserve(parts - 1);
  const std::size_t step = (rows + parts - 1) / parts;
  for (std::size_t p = 1; p < parts; ++p) {
    const std::size_t b = p * step, e = std::min(rows, b + step);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(rows, step));
  for (auto& t : pool) t.join();
}

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<Real>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

template <class Real = double>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    node_ = std::make_shared<Node<Real>>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }
  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }
  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<Real>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 0 ? 1 : numel() / cols(); }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<Real> data() { return node_->value; }
  std::span<const Real> data() const { return node_->value; }
  const std::vector<Real>& values() const { return node_->value; }
  std::vector<Real>& mutable_values() { return node_->value; }

  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  Real item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
  }

  // Gradient accumulator; all zeros when nothing has flowed into it.
  std::span<const Real> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<Real> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  // Value copy cut off from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  void backward();

 private:
  NodePtr node_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

// Builds an op result. `fn` receives the result node and must accumulate into
// parent grads; it is only kept when some input participates in the graph.
template <class Real>
Tensor<Real> make_op(const char* op, Shape shape, std::vector<Real> value,
                     std::initializer_list<const Tensor<Real>*> inputs,
                     std::function<void(Node<Real>&)> fn) {
  auto n = std::make_shared<Node<Real>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode_flag()) {
    for (const auto* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto* t : inputs) n->parents.push_back(t->node());
    n->backward_fn = std::move(fn);
  }
  return Tensor<Real>(std::move(n));
}

template <class Real>
void Tensor<Real>::backward() {
  if (numel() != 1)
    throw Error("backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (node_->released)
    throw Error("backward: graph already consumed; run a new forward pass first");
  if (!node_->requires_grad) throw Error("backward: loss is not connected to any parameter");

  // Iterative post-order DFS gives a topological order (parents first).
  // Owning pointers keep interior nodes alive while parent links are cut.
  std::vector<NodePtr> order;
  std::unordered_set<Node<Real>*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      NodePtr p = top.first->parents[top.second++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = it->get();
    if (n->backward_fn) {
      n->ensure_grad();
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backward_fn(*n);
      n->backward_fn = nullptr;
      n->parents.clear();
      n->released = true;
    }
  }
}

}  // namespace satkit
