#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssn/error.hpp"

namespace ssn {

/// Dimensions of a rank-4 activation in (batch, channel, height, width) order.
struct Shape4 {
  int batch = 1;
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(batch) * channels * height * width;
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "[" + std::to_string(batch) + "," + std::to_string(channels) + "," +
           std::to_string(height) + "," + std::to_string(width) + "]";
  }
};

inline void check_shape(const Shape4& s) {
  if (s.batch < 1) throw DimensionError("tensor batch must be >= 1, got " + std::to_string(s.batch));
  if (s.channels < 1) throw DimensionError("tensor channels must be >= 1, got " + std::to_string(s.channels));
  if (s.height < 1) throw DimensionError("tensor height must be >= 1, got " + std::to_string(s.height));
  if (s.width < 1) throw DimensionError("tensor width must be >= 1, got " + std::to_string(s.width));
}

/// Dense row-major (B, C, H, W) array. Carries activations and their gradients.
template <typename T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() : data_(1, T(0)) {}
  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    check_shape(shape_);
    data_.assign(shape_.count(), fill);
  }
  Tensor4(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    check_shape(shape_);
    if (data_.size() != shape_.count()) {
      throw DimensionError("tensor value count " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  int batch() const { return shape_.batch; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }

  T& operator()(int b, int c, int y, int x) { return data_[index(b, c, y, x)]; }
  T operator()(int b, int c, int y, int x) const { return data_[index(b, c, y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  /// Contiguous H*W plane of one (batch, channel) pair.
  std::span<T> plane(int b, int c) {
    return std::span<T>(data_).subspan(index(b, c, 0, 0), shape_.plane());
  }
  std::span<const T> plane(int b, int c) const {
    return std::span<const T>(data_).subspan(index(b, c, 0, 0), shape_.plane());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

 private:
  std::size_t index(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.channels + c) * shape_.height + y) * shape_.width + x;
  }

  Shape4 shape_;
  std::vector<T> data_;
};

/// A learnable (or buffered) parameter with an attached gradient of the same shape.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = true;

  Param() = default;
  Param(std::string n, std::vector<int> s, T fill = T(0), bool trainable = true)
      : name(std::move(n)), shape(std::move(s)), requires_grad(trainable) {
    std::size_t count = 1;
    for (int d : shape) {
      if (d < 1) throw DimensionError("parameter '" + name + "' has non-positive dimension");
      count *= static_cast<std::size_t>(d);
    }
    value.assign(count, fill);
    grad.assign(count, T(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  int dim(std::size_t axis) const { return shape.at(axis); }

  template <typename U>
  Param<U> cast() const {
    Param<U> out;
    out.name = name;
    out.shape = shape;
    out.value.assign(value.begin(), value.end());
    out.grad.assign(grad.begin(), grad.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace ssn
