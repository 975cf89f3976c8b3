#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cct/error.hpp"

namespace cct {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& s) {
  for (auto e : s)
    if (e <= 0) fail(ErrorKind::dimension, "non-positive extent in shape " + shape_str(s));
}

template <class T>
class Tape;

template <class T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  const Tape<T>* tape = nullptr;  // producer tape; null for leaves

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor handle. Copies share the underlying storage; every
/// kernel returns a fresh buffer.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Storage<T>> impl) : impl_(std::move(impl)) {}

  static Tensor empty(Shape shape) {
    check_shape(shape);
    auto s = std::make_shared<Storage<T>>();
    s->data.resize(static_cast<std::size_t>(numel_of(shape)));
    s->shape = std::move(shape);
    return Tensor(std::move(s));
  }
  static Tensor full(Shape shape, T value) {
    auto t = empty(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
      fail(ErrorKind::dimension, "value count " + std::to_string(values.size()) +
                                     " does not match shape " + shape_str(shape));
    auto s = std::make_shared<Storage<T>>();
    s->shape = std::move(shape);
    s->data = std::move(values);
    return Tensor(std::move(s));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t size(std::int64_t axis) const {
    if (axis < 0) axis += ndim();
    return impl_->shape.at(static_cast<std::size_t>(axis));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient as a detached tensor (zeros when none has been accumulated).
  Tensor grad_tensor() const {
    auto g = zeros(shape());
    if (has_grad()) std::copy(impl_->grad.begin(), impl_->grad.end(), g.ptr());
    return g;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  T item() const {
    if (numel() != 1) fail(ErrorKind::contract, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  T at(std::initializer_list<std::int64_t> idx) const { return impl_->data[offset(idx)]; }
  T& at(std::initializer_list<std::int64_t> idx) { return impl_->data[offset(idx)]; }

  /// Deep copy without gradient or tape history.
  Tensor detach() const { return from(shape(), impl_->data); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(impl_->data.begin(), impl_->data.end());
    return Tensor<U>::from(shape(), std::move(v));
  }

  const std::shared_ptr<Storage<T>>& impl() const { return impl_; }

 private:
  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != ndim())
      fail(ErrorKind::dimension, "index rank mismatch for shape " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      const auto extent = impl_->shape[axis++];
      if (i < 0 || i >= extent) fail(ErrorKind::dimension, "index out of range");
      off = off * static_cast<std::size_t>(extent) + static_cast<std::size_t>(i);
    }
    return off;
  }

  std::shared_ptr<Storage<T>> impl_;
};

/// Records differentiable operations in execution order (hence topological).
///
/// Only one tape per scalar type is active per thread; kernels executed while no
/// tape is active (or with no grad-requiring input) record nothing.
template <class T>
class Tape {
 public:
  struct Node {
    std::string name;
    std::vector<std::shared_ptr<Storage<T>>> inputs;
    std::shared_ptr<Storage<T>> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void record(std::string name, std::vector<std::shared_ptr<Storage<T>>> inputs,
              std::shared_ptr<Storage<T>> output, std::function<void()> backward) {
    output->requires_grad = true;
    output->tape = this;
    nodes_.push_back({std::move(name), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Releases every recorded node (and the activations they keep alive).
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every reachable backward rule once, in
  /// reverse recording order. Gradients are summed into shared inputs.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      fail(ErrorKind::contract, "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    auto& out = *loss.impl();
    if (out.tape != this) fail(ErrorKind::contract, "loss was not produced on this tape");
    out.grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not reachable from the loss
      it->backward();
    }
  }

 private:
  std::vector<Node> nodes_;
};

/// Activates a tape for the current thread for the guard's lifetime.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Disables recording for the guard's lifetime.
template <class T>
class NoGrad {
 public:
  NoGrad() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGrad() { Tape<T>::active() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* prev_;
};

/// Backpropagates from a scalar loss. A leaf loss receives gradient 1 directly.
template <class T>
void backward(Tensor<T>& loss) {
  if (loss.numel() != 1)
    fail(ErrorKind::contract, "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  auto* tape = loss.impl()->tape;
  if (tape == nullptr) {
    if (!loss.requires_grad()) fail(ErrorKind::contract, "loss does not require grad");
    loss.impl()->grad_buffer()[0] += T(1);
    return;
  }
  const_cast<Tape<T>*>(tape)->backward(loss);
}

namespace detail {

/// Tape that should record an op with these inputs, or null.
template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

}  // namespace detail

}  // namespace cct
