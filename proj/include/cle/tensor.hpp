#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cle/errors.hpp"

namespace cle {

std::string shape_to_string(const std::vector<int>& shape);

/// Cache-line aligned storage. Vectorized kernels choose their peeling from
/// the buffer address, so a fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

/// Dense row-major n-dimensional array. Image batches use NHWC order.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), fill);
  }

  BasicTensor(std::vector<int> shape, const std::vector<T>& data)
      : BasicTensor(std::move(shape), Storage(data.begin(), data.end())) {}

  BasicTensor(std::vector<int> shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_to_string(shape_));
    }
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  /// NHWC element access.
  T& at(int n, int y, int x, int c) { return data_[offset4(n, y, x, c)]; }
  const T& at(int n, int y, int x, int c) const { return data_[offset4(n, y, x, c)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  BasicTensor reshaped(std::vector<int> shape) const {
    if (element_count(shape) != data_.size()) {
      throw ConfigError("cannot reshape " + shape_to_string(shape_) + " to " +
                        shape_to_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    typename BasicTensor<U>::Storage out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

  static size_t element_count(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ConfigError("tensor dimensions must be positive: " + shape_to_string(shape));
      n *= static_cast<size_t>(d);
    }
    return n;
  }

 private:
  size_t offset4(int n, int y, int x, int c) const {
    return ((static_cast<size_t>(n) * shape_[1] + y) * shape_[2] + x) * shape_[3] + c;
  }

  std::vector<int> shape_;
  Storage data_;
};

using Tensor = BasicTensor<float>;

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace cle
