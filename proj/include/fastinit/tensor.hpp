// Dense rank-4 latent tensors and row-major matrices.
//
// Layout is row-major with W fastest: element (c, t, h, w) lives at
// ((c * T + t) * H + h) * W + w. Every other module builds on the types and
// index maps declared here.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fastinit {

#ifdef FASTINIT_REAL_DOUBLE
using real_t = double;
#else
using real_t = float;  // production precision; tests instantiate with double
#endif

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
template <class... Args>
[[noreturn]] void fail(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  throw InvalidArgument(os.str());
}

template <class... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}
}  // namespace detail

/// Extents of a C x T x H x W latent.
struct Dims4 {
  std::size_t c = 1, t = 1, h = 1, w = 1;

  constexpr std::size_t size() const { return c * t * h * w; }
  constexpr std::size_t operator[](std::size_t i) const {
    return i == 0 ? c : i == 1 ? t : i == 2 ? h : w;
  }
  constexpr std::size_t& at(std::size_t i) { return i == 0 ? c : i == 1 ? t : i == 2 ? h : w; }
  constexpr bool positive() const { return c > 0 && t > 0 && h > 0 && w > 0; }
  friend constexpr bool operator==(const Dims4&, const Dims4&) = default;

  std::string str() const {
    return std::to_string(c) + "x" + std::to_string(t) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }

  /// Parses "CxTxHxW".
  static Dims4 parse(const std::string& text) {
    Dims4 d;
    std::array<std::size_t, 4> v{};
    std::size_t pos = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t next = text.find('x', pos);
      if ((i < 3) != (next != std::string::npos)) detail::fail("malformed dims '", text, "'");
      std::string part = text.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
        detail::fail("malformed dims '", text, "'");
      v[i] = std::stoul(part);
      pos = next + 1;
    }
    d.c = v[0], d.t = v[1], d.h = v[2], d.w = v[3];
    detail::require(d.positive(), "dims must be positive, got '", text, "'");
    return d;
  }
};

inline std::size_t check_mode(int mode) {
  detail::require(mode >= 1 && mode <= 4, "mode must be in 1..4, got ", mode);
  return static_cast<std::size_t>(mode - 1);
}

template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows * cols, "matrix data length ", data_.size(),
                    " does not match ", rows, "x", cols);
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  Matrix transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out(j, i) = (*this)(i, j);
    return out;
  }

  template <class U>
  Matrix<U> cast() const {
    return Matrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

template <class T>
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Dims4 dims, T fill = T(0)) : dims_(dims), data_(dims.size(), fill) {
    detail::require(dims.positive(), "tensor dims must be positive, got ", dims.str());
  }
  Tensor4(Dims4 dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    detail::require(dims.positive(), "tensor dims must be positive, got ", dims.str());
    detail::require(data_.size() == dims.size(), "tensor data length ", data_.size(),
                    " does not match ", dims.str());
  }

  const Dims4& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  std::size_t index(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return ((c * dims_.t + t) * dims_.h + h) * dims_.w + w;
  }
  T& operator()(std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    return data_[index(c, t, h, w)];
  }
  const T& operator()(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return data_[index(c, t, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  template <class U>
  Tensor4<U> cast() const {
    return Tensor4<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Dims4 dims_;
  std::vector<T> data_;
};

template <class T>
T frobenius_norm(std::span<const T> v) {
  long double acc = 0;
  for (const T& x : v) acc += static_cast<long double>(x) * x;
  return static_cast<T>(std::sqrt(acc));
}

template <class T>
T frobenius_norm(const Tensor4<T>& x) {
  return frobenius_norm<T>(x.data());
}

// Strides of the mode-n unfolding: rows walk `mode`, columns walk the remaining
// modes in ascending order with the earliest remaining mode slowest.
namespace detail {
struct UnfoldMap {
  std::size_t outer, n, inner;  // x viewed as (outer, n, inner) around the mode
};
inline UnfoldMap unfold_map(const Dims4& d, std::size_t m) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < m; ++i) outer *= d[i];
  for (std::size_t i = m + 1; i < 4; ++i) inner *= d[i];
  return {outer, d[m], inner};
}
}  // namespace detail

/// Mode-n matricization. Column index = o * inner + i, where o enumerates the
/// modes before `mode` and i those after it.
template <class T>
Matrix<T> unfold(const Tensor4<T>& x, int mode) {
  const auto m = check_mode(mode);
  const auto [outer, n, inner] = detail::unfold_map(x.dims(), m);
  Matrix<T> out(n, outer * inner);
  const T* src = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const T* row = src + (o * n + j) * inner;
      T* dst = &out(j, o * inner);
      for (std::size_t i = 0; i < inner; ++i) dst[i] = row[i];
    }
  return out;
}

template <class T>
Tensor4<T> fold(const Matrix<T>& mat, int mode, Dims4 dims) {
  const auto m = check_mode(mode);
  detail::require(dims.positive(), "fold dims must be positive, got ", dims.str());
  const auto [outer, n, inner] = detail::unfold_map(dims, m);
  detail::require(mat.rows() == n && mat.cols() == outer * inner, "cannot fold ", mat.rows(), "x",
                  mat.cols(), " matrix along mode ", mode, " into ", dims.str());
  Tensor4<T> out(dims);
  T* dst = out.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = &mat(j, o * inner);
      T* row = dst + (o * n + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] = src[i];
    }
  return out;
}

namespace detail {
// out(o, i, in) = sum_j a(i, j) * x(o, j, in); a is rows x n, row-major.
template <class T>
void mode_product_raw(const T* x, const T* a, T* out, std::size_t outer, std::size_t n,
                      std::size_t inner, std::size_t rows) {
  if (inner == 1) {
    // Last mode: out = x a^T with x viewed as outer x n; run the contiguous
    // axis innermost.
    std::vector<T> at(n * rows);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n; ++j) at[j * rows + i] = a[i * n + j];
    for (std::size_t o = 0; o < outer; ++o) {
      T* y = out + o * rows;
      for (std::size_t i = 0; i < rows; ++i) y[i] = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T xj = x[o * n + j];
        const T* ar = &at[j * rows];
        for (std::size_t i = 0; i < rows; ++i) y[i] += xj * ar[i];
      }
    }
    return;
  }
  for (std::size_t o = 0; o < outer; ++o) {
    const T* xo = x + o * n * inner;
    T* yo = out + o * rows * inner;
    for (std::size_t i = 0; i < rows; ++i) {
      T* y = yo + i * inner;
      for (std::size_t k = 0; k < inner; ++k) y[k] = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T aij = a[i * n + j];
        if (aij == T(0)) continue;
        const T* xr = xo + j * inner;
        for (std::size_t k = 0; k < inner; ++k) y[k] += aij * xr[k];
      }
    }
  }
}
}  // namespace detail

/// x ×_mode a: contracts `mode` of x with the columns of a.
template <class T>
Tensor4<T> mode_product(const Tensor4<T>& x, const Matrix<T>& a, int mode) {
  const auto m = check_mode(mode);
  detail::require(a.cols() == x.dims()[m], "mode_product: matrix has ", a.cols(),
                  " columns but mode ", mode, " has extent ", x.dims()[m]);
  Dims4 out_dims = x.dims();
  out_dims.at(m) = a.rows();
  const auto [outer, n, inner] = detail::unfold_map(x.dims(), m);
  Tensor4<T> out(out_dims);
  detail::mode_product_raw(x.data().data(), a.data().data(), out.data().data(), outer, n, inner,
                           a.rows());
  return out;
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require(a.cols() == b.rows(), "matmul: inner dimensions ", a.cols(), " and ", b.rows(),
                  " differ");
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

}  // namespace fastinit
