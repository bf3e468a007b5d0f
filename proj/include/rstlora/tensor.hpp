#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rstlora/errors.hpp"

namespace rstlora {

/// Dense row-major matrix with value semantics.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) throw ShapeError("matrix data size does not match shape");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  /// Copy of rows [begin, end).
  Matrix slice_rows(std::size_t begin, std::size_t end) const {
    Matrix out(end - begin, cols_);
    std::copy(data_.begin() + begin * cols_, data_.begin() + end * cols_, out.data_.begin());
    return out;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {
inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}
}  // namespace detail

/// out = a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out.data() + i * m;
    const T* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T{0}) continue;
      const T* br = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

/// out += a^T * b
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  detail::require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(),
                  "matmul_tn: shape mismatch");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* ar = a.data() + i * k;
    const T* br = b.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      if (av == T{0}) continue;
      T* o = out.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

/// out = a * b^T
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  // row-axpy over b^T; a strided dot product would not vectorize
  return matmul(a, transpose(b));
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "add: shape mismatch");
  T* ap = a.data();
  const T* bp = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) ap[i] += bp[i];
}

/// a += s * b
template <typename T>
void axpy(Matrix<T>& a, T s, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "axpy: shape mismatch");
  T* ap = a.data();
  const T* bp = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) ap[i] += s * bp[i];
}

template <typename T>
Matrix<T> scaled(Matrix<T> a, T s) {
  for (auto& v : a.values()) v *= s;
  return a;
}

template <typename T>
void add_row_vector(Matrix<T>& a, std::span<const T> v) {
  detail::require(a.cols() == v.size(), "add_row_vector: width mismatch");
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* r = a.data() + i * a.cols();
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += v[j];
  }
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.same_shape(b), "max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

/// FNV-1a over the raw bytes; used as a cheap weight checksum.
template <typename T>
std::uint64_t checksum(const Matrix<T>& m, std::uint64_t h = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  for (std::size_t i = 0; i < m.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace rstlora
