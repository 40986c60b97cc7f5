#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fer {

using Shape = std::vector<std::size_t>;

/// Raised on shape/contract violations in tensor operations.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a kernel produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/**
 * Dense row-major array with explicit shape metadata.
 *
 * There are no views or strides: reshape and transpose produce copies. The
 * default-constructed tensor has shape [1] and holds a single zero.
 */
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor();
  explicit BasicTensor(Shape shape, T fill = T(0));
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Bounds-checked multi-index access.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  BasicTensor reshaped(Shape shape) const;
  void fill(T value);

  /// Throws NonFiniteError naming `context` if any element is NaN/Inf.
  void require_finite(const char* context) const;

  bool operator==(const BasicTensor&) const = default;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return BasicTensor<To>(t.shape(), std::move(out));
}

// Elementwise. Binary ops require identical shapes; no broadcasting.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> map(const BasicTensor<T>& a, T (*fn)(T));

template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a);

/// C[m,n] (+)= A[m,k] * B[k,n] on raw row-major buffers, optionally with
/// either operand transposed. Used by the layer kernels.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate);

// Reductions. Without an axis they reduce over every element and return
// shape [1]; with an axis that axis is removed (rank-1 inputs yield [1]).
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& t);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& t, std::size_t axis);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& t);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& t, std::size_t axis);
template <typename T> BasicTensor<T> max(const BasicTensor<T>& t);
template <typename T> BasicTensor<T> max(const BasicTensor<T>& t, std::size_t axis);

/// Index of the largest element; ties resolve to the lowest index.
template <typename T> std::size_t argmax(std::span<const T> values);
template <typename T> std::size_t argmax(const BasicTensor<T>& t);
/// Row-wise argmax along `axis`, one index per remaining position.
template <typename T> std::vector<std::size_t> argmax(const BasicTensor<T>& t, std::size_t axis);

}  // namespace fer
