#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <new>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "attni2i/rng.hpp"

namespace attni2i {

// Bad user input (shapes, ranges, malformed files).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unusable configuration (unsupported sizes, missing paths).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numeric failure at runtime (non-finite activations or losses).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// 64-byte aligned buffer. Keeping every tensor and scratch buffer on the
// same alignment keeps Eigen's vectorized kernels on one code path, which
// makes results independent of where the allocator happened to place data.
template <typename T>
struct AlignedStorage {
  T* data = nullptr;
  int64_t n = 0;

  explicit AlignedStorage(int64_t count, bool zero = true) : n(count) {
    const size_t bytes = (size_t(count) * sizeof(T) + 63) / 64 * 64;
    if (bytes > 0) {
      data = static_cast<T*>(std::aligned_alloc(64, bytes));
      if (!data) throw std::bad_alloc();
      if (zero) std::memset(data, 0, bytes);
    }
  }
  ~AlignedStorage() { std::free(data); }
  AlignedStorage(const AlignedStorage&) = delete;
  AlignedStorage& operator=(const AlignedStorage&) = delete;
};

}  // namespace detail

// Dense row-major tensor with shared storage. Copies are shallow; use
// clone() when an independent buffer is required.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<detail::AlignedStorage<T>>(count(shape_))) {}

  Tensor(std::initializer_list<int64_t> shape)
      : Tensor(std::vector<int64_t>(shape)) {}

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.begin(), t.end(), value);
    return t;
  }

  static Tensor randn(std::vector<int64_t> shape, Rng& rng, T mean = T(0),
                      T stddev = T(1)) {
    Tensor t(std::move(shape));
    for (auto& v : t) v = T(rng.normal(double(mean), double(stddev)));
    return t;
  }

  static Tensor rand_uniform(std::vector<int64_t> shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (auto& v : t) v = T(rng.uniform(double(lo), double(hi)));
    return t;
  }

  static Tensor from_vector(std::vector<int64_t> shape, const std::vector<T>& values) {
    if (int64_t(values.size()) != count(shape))
      throw InvalidInput("tensor: value count does not match shape");
    Tensor t(std::move(shape));
    std::copy(values.begin(), values.end(), t.begin());
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  int64_t numel() const { return data_ ? data_->n : 0; }
  int ndim() const { return int(shape_.size()); }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t size(int dim) const { return shape_.at(size_t(dim)); }

  T* data() { return data_->data; }
  const T* data() const { return data_->data; }
  T* begin() { return data(); }
  T* end() { return data() + numel(); }
  const T* begin() const { return data(); }
  const T* end() const { return data() + numel(); }

  // Identity of the underlying buffer; used to dedupe parameters on a tape.
  const void* buffer_id() const { return data_.get(); }

  T& operator[](int64_t i) { return data_->data[i]; }
  const T& operator[](int64_t i) const { return data_->data[i]; }

  T& at(int64_t i0, int64_t i1) { return data_->data[i0 * shape_[1] + i1]; }
  T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
    return data_->data[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int64_t i0, int64_t i1) const {
    return data_->data[i0 * shape_[1] + i1];
  }
  const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return data_->data[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(begin(), end(), t.begin());
    return t;
  }

  // Same storage, new shape with identical element count.
  Tensor reshaped(std::vector<int64_t> shape) const {
    if (count(shape) != numel())
      throw InvalidInput("tensor: reshape changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < numel(); ++i) t[i] = U(data_->data[i]);
    return t;
  }

  void fill(T value) { std::fill(begin(), end(), value); }

  bool all_finite() const {
    for (const T* p = begin(); p != end(); ++p)
      if (!std::isfinite(double(*p))) return false;
    return true;
  }

  T min_value() const { return *std::min_element(begin(), end()); }
  T max_value() const { return *std::max_element(begin(), end()); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape_.size(); ++i)
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    os << ')';
    return os.str();
  }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (const int64_t d : shape) {
      if (d < 0) throw InvalidInput("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<detail::AlignedStorage<T>> data_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.begin(), a.end(), b.begin());
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  T m = T(0);
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidInput(msg);
}

}  // namespace attni2i
