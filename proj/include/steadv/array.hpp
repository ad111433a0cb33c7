#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "steadv/errors.hpp"

namespace steadv {

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

// Dense row-major n-d array. The plain value type everywhere; gradients and
// graph bookkeeping live on the Tape, not here.
template <typename T>
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {
    validate();
  }

  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
    if (static_cast<std::int64_t>(data_.size()) != shape_size(shape_))
      throw ShapeError("array: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Rank-specific accessors; indexing math is unchecked.
  T& at(int i, int j) { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  const T& at(int i, int j) const { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }

  T& at(int i, int j, int k) {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }

  bool bit_equal(const Array& other) const {
    if (shape_ != other.shape_) return false;
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (data_[i] != other.data_[i]) return false;
    return true;
  }

  template <typename U>
  Array<U> cast() const {
    Array<U> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  void fill(T v) {
    for (auto& x : data_) x = v;
  }

 private:
  void validate() const {
    for (int d : shape_)
      if (d < 0) throw ShapeError("array: negative dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T max_abs(const Array<T>& a) {
  T m = T(0);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    T v = a[i] < T(0) ? -a[i] : a[i];
    if (v > m) m = v;
  }
  return m;
}

template <typename T>
T min_value(const Array<T>& a) {
  T m = a.size() ? a[0] : T(0);
  for (std::int64_t i = 1; i < a.size(); ++i)
    if (a[i] < m) m = a[i];
  return m;
}

template <typename T>
T max_value(const Array<T>& a) {
  T m = a.size() ? a[0] : T(0);
  for (std::int64_t i = 1; i < a.size(); ++i)
    if (a[i] > m) m = a[i];
  return m;
}

}  // namespace steadv
