#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hicl/error.hpp"

namespace hicl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape);

// Dense row-major array. Value type; copies are deep.
template <typename T>
class NdArray {
 public:
  using value_type = T;

  NdArray() = default;
  explicit NdArray(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  NdArray(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("NdArray: shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static NdArray scalar(T v) { return NdArray(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  T item() const {
    if (data_.size() != 1) {
      throw ShapeError("NdArray::item on array of shape " + shape_str(shape_));
    }
    return data_[0];
  }

  NdArray reshaped(Shape shape) const {
    return NdArray(std::move(shape), data_);
  }

  // Entries [begin, end) along axis 0.
  NdArray rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
      throw ShapeError("NdArray::rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                       ") of " + shape_str(shape_));
    }
    const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = end - begin;
    return NdArray(std::move(s), std::vector<T>(data_.begin() + begin * stride,
                                                data_.begin() + end * stride));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  NdArray<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return NdArray<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const NdArray& a, const NdArray& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("NdArray::at: index rank mismatch for shape " +
                       shape_str(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) {
        throw ShapeError("NdArray::at: index out of range for shape " +
                         shape_str(shape_));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_{0};
  std::vector<T> data_;
};

}  // namespace hicl
