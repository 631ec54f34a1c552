#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "vphype/errors.hpp"
#include "vphype/rng.hpp"

namespace vphype {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

class Tensor;

namespace detail {

// Whether newly created ops record backward rules. Evaluation paths disable
// recording so forward passes build no graph.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t next_node_seq() {
  thread_local std::uint64_t seq = 0;
  return ++seq;
}

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // sized lazily; same length as data when present

  // Recorded application: inputs kept alive plus the rule that routes this
  // node's grad into theirs.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t seq = 0;  // creation order; a valid topological order

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Suspends gradient recording for the enclosing scope.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense n-d array of 64-bit floats with optional tape participation.
// A Tensor is a cheap shared handle; the underlying buffer is treated as
// immutable once produced by an op (parameters mutate between tape runs only).
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(std::vector<double> data, Shape shape) {
    check_shape(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->seq = detail::next_node_seq();
    return t;
  }

  static Tensor zeros(Shape shape) {
    check_shape(shape);
    std::int64_t n = shape_numel(shape);
    return from_data(std::vector<double>(static_cast<std::size_t>(n), 0.0), std::move(shape));
  }

  static Tensor full(Shape shape, double value) {
    check_shape(shape);
    std::int64_t n = shape_numel(shape);
    return from_data(std::vector<double>(static_cast<std::size_t>(n), value), std::move(shape));
  }

  static Tensor scalar(double value) { return from_data({value}, Shape{1}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    check_shape(shape);
    std::int64_t n = shape_numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& v : d) v = rng.normal(mean, stddev);
    return from_data(std::move(d), std::move(shape));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }

  const std::vector<double>& data() const { return node_->data; }

  // In-place access for leaves (parameter updates, gradient checking).
  std::vector<double>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    if (v) node_->ensure_grad();
    return *this;
  }

  const std::vector<double>& grad() const { return node_->grad; }

  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    }
    return node_->data[0];
  }

  double at(std::int64_t linear) const { return node_->data[static_cast<std::size_t>(linear)]; }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // --- op construction ----------------------------------------------------

  // Builds the result node of a primitive. `backward` receives the output
  // node (with grad populated) and accumulates into the parents' grads; it
  // must only run raw arithmetic, never record new ops.
  static Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                        std::function<void(detail::Node&)> backward) {
    Tensor out = from_data(std::move(data), std::move(shape));
    bool needs = false;
    if (detail::grad_mode()) {
      for (const auto& in : inputs) {
        if (in.node_ && in.node_->requires_grad) {
          needs = true;
          break;
        }
      }
    }
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(inputs.size());
      for (auto& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (std::int64_t d : shape) {
      if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode pass over the recorded subgraph that produced a scalar root.
// Construction snapshots the graph in creation order; backward() zeroes all
// grads in the subgraph, seeds the root with 1 and applies each recorded
// rule exactly once in reverse order. Re-running backward() on the same tape
// reproduces bit-identical gradients.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node()) {
    if (!root_) throw ContractError("backward root is undefined");
    if (root_->numel() != 1) {
      throw ContractError("backward root must be scalar, got shape " + shape_str(root_->shape));
    }
    collect();
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  void backward() {
    for (auto& n : nodes_) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    root_->ensure_grad();
    root_->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward_fn) n.backward_fn(n);
    }
  }

 private:
  void collect() {
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{root_.get()};
    std::vector<std::shared_ptr<detail::Node>> keep;
    seen.insert(root_.get());
    keep.push_back(root_);
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) {
          keep.push_back(p);
          stack.push_back(p.get());
        }
      }
    }
    nodes_ = std::move(keep);
    std::sort(nodes_.begin(), nodes_.end(),
              [](const auto& a, const auto& b) { return a->seq < b->seq; });
  }

  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

}  // namespace vphype
