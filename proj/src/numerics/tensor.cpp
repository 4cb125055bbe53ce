#include "cvthead/numerics/tensor.hpp"

#include <atomic>
#include <cstring>
#include <sstream>

namespace cvthead::numerics {

namespace {
std::atomic<bool> g_checked{false};
}

void set_checked_mode(bool enabled) { g_checked.store(enabled, std::memory_order_relaxed); }
bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor() : data_(std::make_shared<const std::vector<T>>(1, T(0))), shape_{} {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
  }
  if (data.size() != shape_numel(shape_)) {
    throw ShapeError("tensor payload has " + std::to_string(data.size()) + " values, shape " +
                     shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)));
  }
  data_ = std::make_shared<const std::vector<T>>(std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out = *this;
  out.node_ = kNoNode;
  out.requires_grad_ = false;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::with_requires_grad(bool value) const {
  Tensor out = detach();
  out.requires_grad_ = value;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
bool Tensor<T>::same_values(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  if (numel() == 0) return true;
  return std::memcmp(raw(), other.raw(), numel() * sizeof(T)) == 0;
}

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected " + shape_str(expected) + ", got " +
                     shape_str(t.shape()));
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void require_shape(const Tensor<float>&, const Shape&, const char*);
template void require_shape(const Tensor<double>&, const Shape&, const char*);

}  // namespace cvthead::numerics
