// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace isalux {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on malformed files or unusable datasets.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  T* ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
  bool has_grad() const { return !grad.empty(); }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables tape recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Define-by-run record of differentiable operations. Records are appended in
/// execution order, so the list is already topologically sorted; backward walks
/// it once in reverse and then discards it.
template <class T>
class Tape {
 public:
  struct Record {
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void()> backward;
    const char* op = "";
  };

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  void push(Record record) { records_.push_back(std::move(record)); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Seeds d(root)/d(root) = 1 and runs every reachable record in reverse.
  /// Returns the number of backward rules executed.
  std::size_t backward_from(const std::shared_ptr<TensorImpl<T>>& root) {
    root->ensure_grad()[0] += T(1);
    std::size_t visited = 0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output->has_grad()) continue;
      it->backward();
      ++visited;
    }
    records_.clear();
    return visited;
  }

 private:
  std::vector<Record> records_;
};

/// Dense row-major tensor with shared ownership of its storage. Copies alias the
/// same node; use clone() or detach() for an independent value.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->data.assign(numel_of(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false) : impl_(std::make_shared<TensorImpl<T>>()) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                       " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T(1)); }
  static BasicTensor scalar(T value, bool requires_grad = false) { return BasicTensor(Shape{1}, value, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& storage() { return impl_->data; }
  const std::vector<T>& storage() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return impl_->has_grad(); }
  /// Gradient view; all zeros if nothing has been accumulated yet.
  std::span<T> grad() { return {impl_->ensure_grad(), numel()}; }
  std::span<const T> grad() const { return {impl_->ensure_grad(), numel()}; }
  void zero_grad() {
    if (impl_->has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  BasicTensor detach() const { return BasicTensor(shape(), impl_->data, false); }
  BasicTensor clone() const { return BasicTensor(shape(), impl_->data, requires_grad()); }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& x) {
  std::vector<To> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(x[i]);
  return BasicTensor<To>(x.shape(), std::move(out));
}

/// Runs reverse-mode differentiation from a scalar loss, accumulating into the
/// grad buffers of every reachable tensor that requires grad.
template <class T>
std::size_t backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss does not depend on any tensor that requires grad");
  }
  auto& tape = Tape<T>::current();
  if (tape.empty()) throw std::logic_error("backward: tape is empty");
  return tape.backward_from(loss.impl());
}

/// A named learnable tensor. The gradient lives in the tensor's grad buffer.
template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> tensor;

  std::span<T> grad() { return tensor.grad(); }
};

/// Owns parameters in registration order; modules keep handles that alias the
/// stored tensors.
template <class T>
class ParameterStore {
 public:
  BasicTensor<T> add(std::string name, BasicTensor<T> value) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::logic_error("parameter registered twice: " + name);
    }
    value.set_requires_grad(true);
    params_.push_back({std::move(name), value});
    return value;
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::size_t element_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.numel();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
};

}  // namespace isalux
