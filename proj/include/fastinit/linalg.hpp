// Dense factorizations: one-sided Jacobi SVD and a tridiagonal-QL symmetric
// eigendecomposition.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "tensor.hpp"

namespace fastinit {

template <class T>
struct Svd {
  Matrix<T> u;           // m x k, orthonormal columns
  std::vector<T> s;      // k, non-increasing, non-negative
  Matrix<T> v;           // n x k, orthonormal columns
};

namespace detail {

// Flips column j of `u` (and `v`, when given) so that the largest-magnitude
// entry of u's column is positive. Ties resolve to the first index.
template <class T>
void fix_signs(Matrix<T>& u, Matrix<T>* v) {
  for (std::size_t j = 0; j < u.cols(); ++j) {
    std::size_t best = 0;
    T best_abs = T(-1);
    for (std::size_t i = 0; i < u.rows(); ++i)
      if (std::abs(u(i, j)) > best_abs) best_abs = std::abs(u(i, j)), best = i;
    if (u(best, j) < T(0)) {
      for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = -u(i, j);
      if (v)
        for (std::size_t i = 0; i < v->rows(); ++i) (*v)(i, j) = -(*v)(i, j);
    }
  }
}

// Replaces the columns flagged in `missing` with unit vectors orthogonal to all
// other columns (Gram-Schmidt over the canonical basis).
template <class T>
void complete_orthonormal(Matrix<T>& u, const std::vector<bool>& missing) {
  const std::size_t m = u.rows();
  std::size_t next_e = 0;
  for (std::size_t j = 0; j < u.cols(); ++j) {
    if (!missing[j]) continue;
    for (; next_e < m; ++next_e) {
      std::vector<long double> cand(m, 0.0L);
      cand[next_e] = 1.0L;
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < u.cols(); ++k) {
          if (k == j || (missing[k] && k > j)) continue;
          long double d = 0;
          for (std::size_t i = 0; i < m; ++i) d += cand[i] * u(i, k);
          for (std::size_t i = 0; i < m; ++i) cand[i] -= d * u(i, k);
        }
      long double nrm = 0;
      for (auto c : cand) nrm += c * c;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-6L) {
        for (std::size_t i = 0; i < m; ++i) u(i, j) = static_cast<T>(cand[i] / nrm);
        ++next_e;
        break;
      }
    }
  }
}

// One-sided Jacobi on a tall matrix given as n columns of length m (m >= n).
template <class T>
Svd<T> jacobi_svd_tall(std::size_t m, std::size_t n, std::vector<T> cols) {
  std::vector<T> vcols(n * n, T(0));
  for (std::size_t j = 0; j < n; ++j) vcols[j * n + j] = T(1);
  const T tol = std::numeric_limits<T>::epsilon();
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      T* ap = &cols[p * m];
      for (std::size_t q = p + 1; q < n; ++q) {
        T* aq = &cols[q * m];
        T alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (alpha == T(0) || beta == T(0)) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const T zeta = (beta - alpha) / (T(2) * gamma);
        const T t = (zeta >= T(0) ? T(1) : T(-1)) / (std::abs(zeta) + std::sqrt(T(1) + zeta * zeta));
        const T c = T(1) / std::sqrt(T(1) + t * t);
        const T s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const T x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        T* vp = &vcols[p * n];
        T* vq = &vcols[q * n];
        for (std::size_t i = 0; i < n; ++i) {
          const T x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<T> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    long double acc = 0;
    for (std::size_t i = 0; i < m; ++i) acc += static_cast<long double>(cols[j * m + i]) * cols[j * m + i];
    norms[j] = static_cast<T>(std::sqrt(acc));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return norms[a] > norms[b]; });

  Svd<T> out{Matrix<T>(m, n), std::vector<T>(n), Matrix<T>(n, n)};
  std::vector<bool> missing(n, false);
  const T floor = std::numeric_limits<T>::min() * T(1e3);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.s[k] = norms[j];
    if (norms[j] <= floor) {
      out.s[k] = T(0);
      missing[k] = true;
    } else {
      for (std::size_t i = 0; i < m; ++i) out.u(i, k) = cols[j * m + i] / norms[j];
    }
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vcols[j * n + i];
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end())
    complete_orthonormal(out.u, missing);
  return out;
}

}  // namespace detail

/// Thin SVD m = U diag(S) V^T with k = min(rows, cols) components.
/// Each left singular vector has its largest-magnitude entry positive.
template <class T>
Svd<T> svd(const Matrix<T>& a) {
  detail::require(a.rows() > 0 && a.cols() > 0, "svd: empty matrix");
  for (const T& x : a.data())
    detail::require(std::isfinite(x), "svd: matrix has non-finite entries");
  const std::size_t m = a.rows(), n = a.cols();
  Svd<T> out;
  if (m >= n) {
    std::vector<T> cols(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) cols[j * m + i] = a(i, j);
    out = detail::jacobi_svd_tall(m, n, std::move(cols));
  } else {
    // Rows of a are the columns of a^T, already contiguous.
    std::vector<T> cols(a.data().begin(), a.data().end());
    Svd<T> t = detail::jacobi_svd_tall(n, m, std::move(cols));
    out.u = std::move(t.v);
    out.s = std::move(t.s);
    out.v = std::move(t.u);
  }
  detail::fix_signs(out.u, &out.v);
  return out;
}

template <class T>
struct SymEigen {
  std::vector<T> values;  // non-increasing
  Matrix<T> vectors;      // columns
};

namespace detail {

// Householder reduction of the symmetric matrix held in v (row-major, n x n)
// to tridiagonal form; d gets the diagonal, e the subdiagonal, and v the
// accumulated orthogonal transform.
template <class T>
void tridiagonalize(std::size_t n, std::vector<T>& v, std::vector<T>& d, std::vector<T>& e) {
  auto V = [&](std::size_t i, std::size_t j) -> T& { return v[i * n + j]; };
  for (std::size_t j = 0; j < n; ++j) d[j] = V(n - 1, j);
  for (std::size_t i = n - 1; i > 0; --i) {
    T scale = 0, h = 0;
    for (std::size_t k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == T(0)) {
      e[i] = d[i - 1];
      for (std::size_t j = 0; j < i; ++j) {
        d[j] = V(i - 1, j);
        V(i, j) = V(j, i) = T(0);
      }
    } else {
      for (std::size_t k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      T f = d[i - 1];
      T g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (std::size_t j = 0; j < i; ++j) e[j] = T(0);
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        V(j, i) = f;
        g = e[j] + V(j, j) * f;
        for (std::size_t k = j + 1; k < i; ++k) {
          g += V(k, j) * d[k];
          e[k] += V(k, j) * f;
        }
        e[j] = g;
      }
      f = 0;
      for (std::size_t j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const T hh = f / (h + h);
      for (std::size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (std::size_t j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (std::size_t k = j; k < i; ++k) V(k, j) -= (f * e[k] + g * d[k]);
        d[j] = V(i - 1, j);
        V(i, j) = T(0);
      }
    }
    d[i] = h;
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    V(n - 1, i) = V(i, i);
    V(i, i) = T(1);
    const T h = d[i + 1];
    if (h != T(0)) {
      for (std::size_t k = 0; k <= i; ++k) d[k] = V(k, i + 1) / h;
      for (std::size_t j = 0; j <= i; ++j) {
        T g = 0;
        for (std::size_t k = 0; k <= i; ++k) g += V(k, i + 1) * V(k, j);
        for (std::size_t k = 0; k <= i; ++k) V(k, j) -= g * d[k];
      }
    }
    for (std::size_t k = 0; k <= i; ++k) V(k, i + 1) = T(0);
  }
  for (std::size_t j = 0; j < n; ++j) {
    d[j] = V(n - 1, j);
    V(n - 1, j) = T(0);
  }
  V(n - 1, n - 1) = T(1);
  e[0] = T(0);
}

// Implicit QL iterations on the tridiagonal (d, e), rotating the columns of v.
template <class T>
void tridiagonal_ql(std::size_t n, std::vector<T>& v, std::vector<T>& d, std::vector<T>& e) {
  auto V = [&](std::size_t i, std::size_t j) -> T& { return v[i * n + j]; };
  for (std::size_t i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = T(0);
  T f = 0, tst1 = 0;
  const T eps = std::numeric_limits<T>::epsilon();
  for (std::size_t l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    std::size_t m = l;
    while (m < n - 1 && std::abs(e[m]) > eps * tst1) ++m;
    if (m > l) {
      for (int iter = 0; iter < 60; ++iter) {
        T g = d[l];
        T p = (d[l + 1] - g) / (T(2) * e[l]);
        T r = std::hypot(p, T(1));
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const T dl1 = d[l + 1];
        T h = g - d[l];
        for (std::size_t i = l + 2; i < n; ++i) d[i] -= h;
        f += h;
        p = d[m];
        T c = 1, c2 = 1, c3 = 1, s = 0, s2 = 0;
        const T el1 = e[l + 1];
        for (std::size_t i = m; i-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[i];
          h = c * p;
          r = std::hypot(p, e[i]);
          e[i + 1] = s * r;
          s = e[i] / r;
          c = p / r;
          p = c * d[i] - s * g;
          d[i + 1] = h + s * (c * g + s * d[i]);
          for (std::size_t k = 0; k < n; ++k) {
            h = V(k, i + 1);
            V(k, i + 1) = s * V(k, i) + c * h;
            V(k, i) = c * V(k, i) - s * h;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
        if (std::abs(e[l]) <= eps * tst1) break;
      }
    }
    d[l] += f;
    e[l] = T(0);
  }
}

}  // namespace detail

/// Symmetric eigendecomposition (Householder tridiagonalization followed by
/// implicit QL). Eigenvectors follow the same sign convention as svd's left
/// vectors.
template <class T>
SymEigen<T> sym_eigen(const Matrix<T>& sym) {
  detail::require(sym.rows() == sym.cols(), "sym_eigen: matrix is not square");
  const std::size_t n = sym.rows();
  detail::require(n >= 1, "sym_eigen: empty matrix");
  for (const T& x : sym.data()) detail::require(std::isfinite(x), "sym_eigen: matrix has non-finite entries");
  std::vector<T> v(sym.data().begin(), sym.data().end()), d(n), e(n);
  if (n > 1) {
    detail::tridiagonalize(n, v, d, e);
    detail::tridiagonal_ql(n, v, d, e);
  } else {
    d[0] = v[0];
    v[0] = T(1);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return d[x] > d[y]; });
  SymEigen<T> out{std::vector<T>(n), Matrix<T>(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = d[order[k]];
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v[i * n + order[k]];
  }
  detail::fix_signs<T>(out.vectors, nullptr);
  return out;
}

/// Top-`r` left singular vectors of `a`, via the eigenvectors of a a^T
/// accumulated in double. Used by HOSVD where only U is needed and the
/// unfoldings are short and wide.
template <class T>
Matrix<T> leading_left_singular_vectors(const Matrix<T>& a, std::size_t r,
                                        std::vector<T>* singular_values = nullptr) {
  const std::size_t m = a.rows(), n = a.cols();
  detail::require(r >= 1 && r <= m, "leading_left_singular_vectors: rank ", r,
                  " outside 1..", m);
  // Gram matrix as a sum of outer products of the columns, so the innermost
  // loop runs over a contiguous row of the result.
  std::vector<double> at(n * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < n; ++k) at[k * m + i] = static_cast<double>(a(i, k));
  Matrix<double> gram(m, m);
  for (std::size_t k = 0; k < n; ++k) {
    const double* col = &at[k * m];
    for (std::size_t i = 0; i < m; ++i) {
      const double ci = col[i];
      double* gr = &gram(i, 0);
      for (std::size_t j = i; j < m; ++j) gr[j] += ci * col[j];
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < i; ++j) gram(i, j) = gram(j, i);
  auto eig = sym_eigen(gram);
  Matrix<T> u(m, r);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < r; ++k) u(i, k) = static_cast<T>(eig.vectors(i, k));
  if (singular_values) {
    singular_values->resize(r);
    for (std::size_t k = 0; k < r; ++k)
      (*singular_values)[k] = static_cast<T>(std::sqrt(std::max(0.0, eig.values[k])));
  }
  return u;
}

}  // namespace fastinit
