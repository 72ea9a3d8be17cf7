#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "smt/error.hpp"

namespace smt {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] < 1) {
      throw InputError("tensor extent " + std::to_string(i) + " must be >= 1, got shape " +
                       shape_str(shape));
    }
  }
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Shared handle to a dense row-major buffer. Copies alias the same storage;
/// use `clone()` for a detached deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
    check_shape(shape);
    impl_->data.assign(static_cast<std::size_t>(smt::numel(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
    check_shape(shape);
    if (static_cast<Index>(values.size()) != smt::numel(shape)) {
      throw InputError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Index dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw UsageError("axis out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
  }
  Index numel() const { return static_cast<Index>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T& operator[](Index i) { return impl_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
  void drop_grad() { impl_->grad.clear(); }

  /// Detached deep copy (no grad, no tape history).
  Tensor clone() const { return Tensor(shape(), impl_->data); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Append-only record of differentiable operations for one execution context.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;
  /// Receives the upstream gradient of the node output and accumulates into inputs.
  using BackwardFn = std::function<void(std::span<const T>)>;

  struct Node {
    std::string op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    BackwardFn backward;
  };

  void record(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

  /// Populates `grad` of every requires-grad tensor reachable from `loss`.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (nodes_.empty()) throw UsageError("backward called on an empty tape");
    auto loss_impl = loss.impl();
    if (loss_impl->grad.empty()) loss_impl->grad.assign(1, T(0));
    loss_impl->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const auto& out = it->output;
      if (out->grad.empty()) continue;
      it->backward(std::span<const T>(out->grad));
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
template <typename T>
Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <typename T>
Tape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

/// Makes `tape` the recording target for this thread for the guard's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference, optimizer updates).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Records `out` as produced by `op` from `inputs` if a tape is active and any
/// input requires a gradient. The backward closure must only accumulate into
/// inputs whose `requires_grad` is set.
template <typename T>
bool record_op(std::string_view op, const std::vector<Tensor<T>>& inputs, Tensor<T>& out,
               typename Tape<T>::BackwardFn backward) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return false;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return false;
  out.set_requires_grad(true);
  typename Tape<T>::Node node;
  node.op = std::string(op);
  for (const auto& in : inputs) {
    if (in.defined()) node.inputs.push_back(in.impl());
  }
  node.output = out.impl();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return true;
}

/// Gradient buffer of `t` if it participates in differentiation, else an empty span.
/// Handles share storage, so a const handle still exposes the gradient slot.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  auto& g = t.impl()->grad;
  if (g.empty()) g.assign(t.impl()->data.size(), T(0));
  return g;
}

}  // namespace smt
