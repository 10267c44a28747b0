#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "leignn/common.hpp"

namespace leignn {

template <typename Real>
class Tape;

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename Real>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool op_output = false;
  const void* tape = nullptr;  // tape that recorded the producing op
  std::uint64_t id = next_tensor_id();
};

template <typename Real>
void ensure_grad(TensorNode<Real>& node) {
  if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), Real(0));
}

}  // namespace detail

/// Dense tensor handle with value semantics on the handle and shared storage
/// underneath. Storage is treated as immutable once a tensor has entered an
/// operation; mutation is reserved for parameter updates between tapes.
template <typename Real>
class Tensor {
 public:
  using Node = detail::TensorNode<Real>;

  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<Real> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    std::size_t expected = 1;
    for (std::size_t d : shape) expected *= d;
    detail::check(!shape.empty(), "tensor shape must not be empty");
    detail::check(expected == data.size(),
                  "tensor data length " + std::to_string(data.size()) +
                      " does not match shape product " + std::to_string(expected));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::size_t n) { return Tensor({n}, std::vector<Real>(n, Real(0))); }
  static Tensor zeros(std::size_t r, std::size_t c) {
    return Tensor({r, c}, std::vector<Real>(r * c, Real(0)));
  }
  static Tensor full(std::size_t r, std::size_t c, Real value) {
    return Tensor({r, c}, std::vector<Real>(r * c, value));
  }
  static Tensor vector(std::vector<Real> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<Real> values) {
    return Tensor({r, c}, std::move(values));
  }
  static Tensor scalar(Real value) { return Tensor({1}, {value}); }

  bool defined() const { return node_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  /// Rank-1 tensors are treated as single-column matrices by row-oriented ops.
  std::size_t rows() const { return node_->shape[0]; }
  std::size_t cols() const { return rank() == 1 ? 1 : node_->shape[1]; }

  Real at(std::size_t i) const { return node_->data[i]; }
  Real at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }
  Real item() const {
    detail::check(size() == 1, "item() requires a single-element tensor");
    return node_->data[0];
  }

  const std::vector<Real>& data() const { return node_->data; }
  /// In-place access for optimizers and finite-difference probes. Never call
  /// while a tape holding this tensor is still alive.
  std::vector<Real>& mutable_data() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    detail::check(!node_->op_output, "cannot toggle requires_grad on an op output");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<Real>& grad_data() const {
    detail::check(has_grad(), "tensor has no accumulated gradient");
    return node_->grad;
  }
  Tensor grad() const {
    detail::check(has_grad(), "tensor has no accumulated gradient");
    return Tensor(node_->shape, node_->grad);
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

  Tensor clone() const {
    Tensor copy(node_->shape, node_->data, node_->requires_grad);
    return copy;
  }

  std::uint64_t id() const { return node_->id; }

  /// Internal: shared node access for ops and tapes.
  const std::shared_ptr<Node>& impl() const { return node_; }

 private:
  friend class Tape<Real>;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

/// Gradients keyed by tensor identity, in first-use order.
template <typename Real>
class GradMap {
 public:
  void insert(Tensor<Real> leaf, Tensor<Real> grad) {
    index_[leaf.impl().get()] = items_.size();
    items_.emplace_back(std::move(leaf), std::move(grad));
  }

  const Tensor<Real>* find(const Tensor<Real>& leaf) const {
    auto it = index_.find(leaf.impl().get());
    if (it == index_.end()) return nullptr;
    return &items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<Tensor<Real>, Tensor<Real>>> items_;
  std::unordered_map<const void*, std::size_t> index_;
};

/// Records primitive operations in execution order and replays them in exact
/// reverse order on backward(). One tape per forward evaluation; tapes are
/// never shared across threads.
template <typename Real>
class Tape {
 public:
  using Node = detail::TensorNode<Real>;
  using NodePtr = std::shared_ptr<Node>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register one primitive. `fn` must read the output gradient and add each
  /// input's contribution into its grad buffer. Call only when at least one
  /// input requires a gradient. Public so tests can inject custom primitives.
  void record_op(const std::vector<Tensor<Real>>& inputs, Tensor<Real>& output,
                 std::function<void()> fn) {
    detail::check(!consumed_, "tape already consumed by backward");
    for (const auto& in : inputs) {
      const auto& node = in.impl();
      if (node->op_output) {
        detail::check(node->tape == this, "input tensor belongs to a different tape");
      } else if (node->requires_grad) {
        if (leaf_set_.insert(node.get()).second) leaves_.push_back(in);
      }
    }
    auto out = output.impl();
    out->requires_grad = true;
    out->op_output = true;
    out->tape = this;
    entries_.push_back(std::move(fn));
  }

  /// Reverse sweep from a scalar output. Gradients accumulate on every
  /// requires_grad leaf and are also returned as a map. The tape is consumed.
  GradMap<Real> backward(const Tensor<Real>& output) {
    detail::check(!consumed_, "tape already consumed by backward");
    detail::check(output.size() == 1, "backward requires a scalar output");
    const auto& out = output.impl();
    detail::check(out->op_output && out->tape == this, "output was not produced on this tape");

    out->grad.assign(1, Real(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();

    GradMap<Real> grads;
    for (const auto& leaf : leaves_) {
      auto node = leaf.impl();
      detail::ensure_grad(*node);
      grads.insert(leaf, Tensor<Real>(node->shape, node->grad));
    }
    consumed_ = true;
    entries_.clear();
    return grads;
  }

  std::size_t num_ops() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  const std::vector<Tensor<Real>>& leaves() const { return leaves_; }

 private:
  std::vector<std::function<void()>> entries_;
  std::vector<Tensor<Real>> leaves_;
  std::unordered_set<const void*> leaf_set_;
  bool consumed_ = false;
};

}  // namespace leignn
