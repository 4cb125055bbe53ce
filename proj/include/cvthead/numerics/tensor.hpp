#pragma once

#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvthead/errors.hpp"

namespace cvthead::numerics {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// When enabled, every op validates its output and throws NumericError on NaN/Inf.
void set_checked_mode(bool enabled);
bool checked_mode();

template <typename T>
class GradTape;

// Dense row-major array. The payload is shared and never mutated after
// construction, so copies are cheap and safe to hand across threads.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  static constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

  Tensor();
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor scalar(T value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_ ? data_->size() : 0; }
  bool empty() const noexcept { return numel() == 0; }

  std::span<const T> data() const noexcept {
    return data_ ? std::span<const T>(*data_) : std::span<const T>();
  }
  const T* raw() const noexcept { return data_ ? data_->data() : nullptr; }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const;
  std::vector<T> to_vector() const { return data_ ? *data_ : std::vector<T>(); }

  bool requires_grad() const noexcept { return requires_grad_; }
  std::optional<NodeId> node_id() const noexcept {
    return node_ == kNoNode ? std::nullopt : std::optional<NodeId>(node_);
  }
  bool tracked() const noexcept { return node_ != kNoNode; }

  // Same payload, no tape handle, no gradient requirement.
  Tensor detach() const;
  Tensor with_requires_grad(bool value) const;
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(out), requires_grad_);
  }

  bool same_values(const Tensor& other) const;

 private:
  friend class GradTape<T>;

  std::shared_ptr<const std::vector<T>> data_;
  Shape shape_;
  bool requires_grad_ = false;
  NodeId node_ = kNoNode;
};

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cvthead::numerics
