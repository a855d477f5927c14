#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hat/errors.h"

namespace hat {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  // Empty until the first accumulation during backward.
  std::vector<T> grad;
  // Leaf flag set by the user.
  bool requires_grad = false;
  // True for leaves with requires_grad and for outputs of recorded ops.
  bool tracked = false;
};

/// Dense row-major tensor handle. Copies share storage; ops never mutate
/// their inputs, so sharing is only observable through the optimizer,
/// which updates leaves in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const T* ptr() const { return impl_->data.data(); }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !impl_->grad.empty(); }
  // Accumulated gradient, or zeros if backward never reached this tensor.
  Tensor grad() const;
  std::span<const T> grad_data() const { return impl_->grad; }
  void zero_grad();

  // Same values, fresh storage, detached from any tape.
  Tensor clone() const;
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(impl_->shape, std::move(out));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Ordered record of differentiable ops executed while the tape is active.
/// Backward replays the entries in reverse execution order, which is a
/// valid reverse topological order because every entry's inputs were
/// produced before it.
template <typename T>
class GradTape {
 public:
  using Entry = std::function<void()>;

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every tracked tensor.
  void backward(const Tensor<T>& loss);

 private:
  std::vector<Entry> entries_;
};

template <typename T>
void backward(GradTape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

// Tape that ops on this thread record into, or nullptr.
template <typename T>
GradTape<T>* active_tape();

/// Activates a tape on the current thread for the guard's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradTape<float>;
extern template class GradTape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace hat
