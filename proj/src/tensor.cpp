#include "fer/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fer {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) throw TensorError("tensor shape must have at least one dimension");
  std::size_t n = 1;
  for (auto d : shape) {
    if (d == 0) throw TensorError("tensor dimension must be >= 1, got shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor() : shape_{1}, data_(1, T(0)) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  const auto n = shape_size(shape_);
  if (data_.size() != n) {
    throw TensorError("tensor of shape " + shape_string(shape_) + " needs " + std::to_string(n) +
                      " values, got " + std::to_string(data_.size()));
  }
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw TensorError("axis " + std::to_string(axis) + " out of range");
  return shape_[axis];
}

template <typename T>
std::size_t BasicTensor<T>::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) throw TensorError("index rank does not match tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw TensorError("index out of bounds");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(index)];
}

template <typename T>
const T& BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(index)];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw TensorError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void BasicTensor<T>::require_finite(const char* context) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw NonFiniteError(std::string(context) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

template <typename T, typename F>
BasicTensor<T> zip(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op, F f) {
  require_same_shape(a, b, op);
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  out.require_finite(op);
  return out;
}

template <typename T, typename F>
BasicTensor<T> unary(const BasicTensor<T>& a, const char* op, F f) {
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  out.require_finite(op);
  return out;
}

// Splits `shape` around `axis` into (outer, extent, inner) counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw TensorError("reduction axis " + std::to_string(axis) + " out of range for shape " +
                      shape_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) s.reduced.push_back(shape[i]);
  if (s.reduced.empty()) s.reduced.push_back(1);
  return s;
}

template <typename T, typename Init, typename Step>
BasicTensor<T> reduce_axis(const BasicTensor<T>& t, std::size_t axis, Init init, Step step) {
  const auto s = split_axis(t.shape(), axis);
  BasicTensor<T> out(s.reduced);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T acc = init(t[o * s.extent * s.inner + i]);
      for (std::size_t e = 1; e < s.extent; ++e) acc = step(acc, t[(o * s.extent + e) * s.inner + i]);
      out[o * s.inner + i] = acc;
    }
  }
  return out;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return zip(a, b, "mul", [](T x, T y) { return x * y; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  return unary(a, "add_scalar", [s](T x) { return x + s; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  return unary(a, "scale", [s](T x) { return x * s; });
}

template <typename T>
BasicTensor<T> map(const BasicTensor<T>& a, T (*fn)(T)) {
  return unary(a, "map", fn);
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  using ConstMap = Eigen::Map<const RowMatrix<T>>;
  const auto rows_a = static_cast<Eigen::Index>(trans_a ? k : m);
  const auto cols_a = static_cast<Eigen::Index>(trans_a ? m : k);
  const auto rows_b = static_cast<Eigen::Index>(trans_b ? n : k);
  const auto cols_b = static_cast<Eigen::Index>(trans_b ? k : n);
  ConstMap ma(a.data(), rows_a, cols_a);
  ConstMap mb(b.data(), rows_b, cols_b);
  Eigen::Map<RowMatrix<T>> mc(c.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!accumulate) mc.setZero();
  if (trans_a && trans_b) {
    mc.noalias() += ma.transpose() * mb.transpose();
  } else if (trans_a) {
    mc.noalias() += ma.transpose() * mb;
  } else if (trans_b) {
    mc.noalias() += ma * mb.transpose();
  } else {
    mc.noalias() += ma * mb;
  }
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw TensorError("matmul: operands must be rank 2");
  if (a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                      shape_string(b.shape()));
  }
  BasicTensor<T> out({a.dim(0), b.dim(1)});
  gemm<T>(false, false, a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), out.data(), false);
  out.require_finite("matmul");
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw TensorError("transpose: operand must be rank 2");
  const auto rows = a.dim(0), cols = a.dim(1);
  BasicTensor<T> out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& t) {
  T acc = T(0);
  for (auto v : t.data()) acc += v;
  return BasicTensor<T>({1}, std::vector<T>{acc});
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& t, std::size_t axis) {
  return reduce_axis(t, axis, [](T v) { return v; }, [](T acc, T v) { return acc + v; });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& t) {
  auto s = sum(t);
  s[0] /= static_cast<T>(t.size());
  return s;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& t, std::size_t axis) {
  auto s = sum(t, axis);
  const auto n = static_cast<T>(t.shape()[axis]);
  for (auto& v : s.data()) v /= n;
  return s;
}

template <typename T>
BasicTensor<T> max(const BasicTensor<T>& t) {
  return BasicTensor<T>({1}, std::vector<T>{t[argmax(t)]});
}

template <typename T>
BasicTensor<T> max(const BasicTensor<T>& t, std::size_t axis) {
  return reduce_axis(t, axis, [](T v) { return v; }, [](T acc, T v) { return v > acc ? v : acc; });
}

template <typename T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw TensorError("argmax of an empty sequence");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

template <typename T>
std::size_t argmax(const BasicTensor<T>& t) {
  return argmax<T>(t.data());
}

template <typename T>
std::vector<std::size_t> argmax(const BasicTensor<T>& t, std::size_t axis) {
  const auto s = split_axis(t.shape(), axis);
  std::vector<std::size_t> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      T best_value = t[o * s.extent * s.inner + i];
      for (std::size_t e = 1; e < s.extent; ++e) {
        const T v = t[(o * s.extent + e) * s.inner + i];
        if (v > best_value) {
          best_value = v;
          best = e;
        }
      }
      out[o * s.inner + i] = best;
    }
  }
  return out;
}

#define FER_INSTANTIATE_TENSOR(T)                                                                  \
  template class BasicTensor<T>;                                                                   \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                       \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                    \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                         \
  template BasicTensor<T> map(const BasicTensor<T>&, T (*)(T));                                    \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                        \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, std::span<const T>,     \
                        std::span<const T>, std::span<T>, bool);                                   \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                              \
  template BasicTensor<T> sum(const BasicTensor<T>&, std::size_t);                                 \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                             \
  template BasicTensor<T> mean(const BasicTensor<T>&, std::size_t);                                \
  template BasicTensor<T> max(const BasicTensor<T>&);                                              \
  template BasicTensor<T> max(const BasicTensor<T>&, std::size_t);                                 \
  template std::size_t argmax<T>(std::span<const T>);                                              \
  template std::size_t argmax(const BasicTensor<T>&);                                              \
  template std::vector<std::size_t> argmax(const BasicTensor<T>&, std::size_t);

FER_INSTANTIATE_TENSOR(float)
FER_INSTANTIATE_TENSOR(double)

}  // namespace fer
