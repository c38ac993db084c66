// Per-sample Tucker factorization (truncated HOSVD), reconstruction and
// storage accounting.
#pragma once

#include <array>
#include <algorithm>

#include "linalg.hpp"
#include "tensor.hpp"

namespace fastinit {

struct TuckerRanks {
  std::size_t c = 4, t = 8, h = 32, w = 32;

  constexpr std::size_t operator[](std::size_t i) const {
    return i == 0 ? c : i == 1 ? t : i == 2 ? h : w;
  }
  constexpr std::size_t core_size() const { return c * t * h * w; }
  Dims4 core_dims() const { return {c, t, h, w}; }
  friend constexpr bool operator==(const TuckerRanks&, const TuckerRanks&) = default;

  void validate(const Dims4& dims) const {
    for (std::size_t i = 0; i < 4; ++i)
      detail::require((*this)[i] >= 1 && (*this)[i] <= dims[i], "Tucker rank ", (*this)[i],
                      " for mode ", i + 1, " outside 1..", dims[i]);
  }

  /// Full channel rank and half of each spatio-temporal extent; gives the
  /// fixed (4, 8, 32, 32) configuration on a 4x16x64x64 latent.
  static TuckerRanks for_dims(const Dims4& d) {
    auto half = [](std::size_t n) { return std::max<std::size_t>(1, n / 2); };
    return {std::min<std::size_t>(d.c, 4), half(d.t), half(d.h), half(d.w)};
  }

  static TuckerRanks full(const Dims4& d) { return {d.c, d.t, d.h, d.w}; }
};

template <class T>
struct TuckerFactorization {
  Tensor4<T> core;                    // R_c x R_t x R_h x R_w
  std::array<Matrix<T>, 4> factors;   // U^(c), U^(t), U^(h), U^(w); dim_i x R_i

  Dims4 dims() const {
    return {factors[0].rows(), factors[1].rows(), factors[2].rows(), factors[3].rows()};
  }
  TuckerRanks ranks() const {
    const auto& d = core.dims();
    return {d.c, d.t, d.h, d.w};
  }

  void validate() const {
    const Dims4& cd = core.dims();
    for (std::size_t i = 0; i < 4; ++i)
      detail::require(factors[i].cols() == cd[i], "Tucker factor ", i + 1, " has ",
                      factors[i].cols(), " columns but the core extent is ", cd[i]);
  }
};

/// Truncated HOSVD: factors are the leading left singular vectors of each
/// mode unfolding and the core is x projected onto them. A zero input yields
/// canonical-basis factors and a zero core.
template <class T>
TuckerFactorization<T> hosvd(const Tensor4<T>& x, const TuckerRanks& ranks) {
  ranks.validate(x.dims());
  TuckerFactorization<T> f;
  for (int mode = 1; mode <= 4; ++mode)
    f.factors[mode - 1] = leading_left_singular_vectors(unfold(x, mode), ranks[mode - 1]);
  Tensor4<T> core = x;
  for (int mode = 1; mode <= 4; ++mode) core = mode_product(core, f.factors[mode - 1].transposed(), mode);
  f.core = std::move(core);
  return f;
}

template <class T>
Tensor4<T> reconstruct(const TuckerFactorization<T>& f) {
  f.validate();
  Tensor4<T> out = f.core;
  for (int mode = 1; mode <= 4; ++mode) out = mode_product(out, f.factors[mode - 1], mode);
  return out;
}

/// ||x - y||_F / ||x||_F.
template <class T>
T relative_error(const Tensor4<T>& x, const Tensor4<T>& y) {
  detail::require(x.dims() == y.dims(), "relative_error: dims ", x.dims().str(), " vs ",
                  y.dims().str());
  long double num = 0, den = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long double d = static_cast<long double>(x[i]) - y[i];
    num += d * d;
    den += static_cast<long double>(x[i]) * x[i];
  }
  detail::require(den > 0, "relative_error: reference tensor has zero norm");
  return static_cast<T>(std::sqrt(num / den));
}

/// Dense element count over Tucker storage, counting the core and all four
/// factor matrices.
inline double compression_ratio(const Dims4& dims, const TuckerRanks& ranks) {
  ranks.validate(dims);
  const double dense = static_cast<double>(dims.size());
  double stored = static_cast<double>(ranks.core_size());
  for (std::size_t i = 0; i < 4; ++i) stored += static_cast<double>(dims[i] * ranks[i]);
  return dense / stored;
}

}  // namespace fastinit
