// 3-D spectra over (T, H, W) per channel, low-pass masks, frequency-domain
// noise recombination and latent-level coherence metrics.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "fft.hpp"
#include "tensor.hpp"

namespace fastinit {

/// Spatio-temporal grid of one channel.
struct GridDims {
  std::size_t t = 1, h = 1, w = 1;
  std::size_t size() const { return t * h * w; }
  friend constexpr bool operator==(const GridDims&, const GridDims&) = default;
  static GridDims of(const Dims4& d) { return {d.t, d.h, d.w}; }
};

/// Spectrum with DC shifted to bin (T/2, H/2, W/2) of every channel.
template <class T>
struct ComplexVolume {
  Dims4 dims;
  std::vector<std::complex<T>> data;

  std::complex<T>& at(std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    return data[((c * dims.t + t) * dims.h + h) * dims.w + w];
  }
  const std::complex<T>& at(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return data[((c * dims.t + t) * dims.h + h) * dims.w + w];
  }
};

namespace detail {

// Transforms each channel's (T, H, W) volume in place along all three axes.
template <class T>
void fft3_inplace(std::vector<std::complex<T>>& v, const Dims4& d, bool inverse) {
  const FftPlan<T> pw(d.w), ph(d.h), pt(d.t);
  const std::size_t vol = d.t * d.h * d.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    std::complex<T>* base = v.data() + c * vol;
    for (std::size_t r = 0; r < d.t * d.h; ++r) pw.transform(base + r * d.w, 1, inverse);
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t w = 0; w < d.w; ++w) ph.transform(base + t * d.h * d.w + w, d.w, inverse);
    for (std::size_t hw = 0; hw < d.h * d.w; ++hw) pt.transform(base + hw, d.h * d.w, inverse);
  }
}

// Circular shift of each channel volume by (st, sh, sw).
template <class V>
std::vector<V> shift3(const std::vector<V>& in, const Dims4& d, std::size_t st, std::size_t sh,
                      std::size_t sw) {
  std::vector<V> out(in.size());
  const std::size_t vol = d.t * d.h * d.w;
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t t = 0; t < d.t; ++t)
      for (std::size_t h = 0; h < d.h; ++h) {
        const std::size_t tt = (t + st) % d.t, hh = (h + sh) % d.h;
        const V* src = in.data() + c * vol + (t * d.h + h) * d.w;
        V* dst = out.data() + c * vol + (tt * d.h + hh) * d.w;
        for (std::size_t w = 0; w < d.w; ++w) dst[(w + sw) % d.w] = src[w];
      }
  return out;
}

}  // namespace detail

template <class T>
ComplexVolume<T> fft3(const Tensor4<T>& x) {
  const Dims4& d = x.dims();
  std::vector<std::complex<T>> v(x.data().begin(), x.data().end());
  detail::fft3_inplace(v, d, false);
  return {d, detail::shift3(v, d, d.t / 2, d.h / 2, d.w / 2)};
}

/// Inverse of fft3; returns the real part.
template <class T>
Tensor4<T> ifft3(const ComplexVolume<T>& spec, T* max_imag = nullptr) {
  const Dims4& d = spec.dims;
  auto v = detail::shift3(spec.data, d, d.t - d.t / 2, d.h - d.h / 2, d.w - d.w / 2);
  detail::fft3_inplace(v, d, true);
  Tensor4<T> out(d);
  T worst = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i].real();
    worst = std::max(worst, std::abs(v[i].imag()));
  }
  if (max_imag) *max_imag = worst;
  return out;
}

template <class T>
struct SpectralMask {
  GridDims dims;
  T cutoff = T(0.25);
  std::vector<T> values;  // centered, (T, H, W) row-major

  T at(std::size_t t, std::size_t h, std::size_t w) const {
    return values[(t * dims.h + h) * dims.w + w];
  }
  static SpectralMask constant(GridDims dims, T value) {
    return {dims, T(1), std::vector<T>(dims.size(), value)};
  }
};

namespace detail {
// Normalized frequency of centered bin k on an axis of length n; Nyquist = 1.
inline double centered_frequency(std::size_t k, std::size_t n) {
  if (n <= 1) return 0.0;
  return 2.0 * (static_cast<double>(k) - static_cast<double>(n / 2)) / static_cast<double>(n);
}

template <class T, class Profile>
SpectralMask<T> radial_mask(GridDims dims, T d0, Profile profile) {
  detail::require(dims.t > 0 && dims.h > 0 && dims.w > 0, "mask dims must be positive");
  SpectralMask<T> m{dims, d0, std::vector<T>(dims.size())};
  for (std::size_t t = 0; t < dims.t; ++t) {
    const double ft = centered_frequency(t, dims.t);
    for (std::size_t h = 0; h < dims.h; ++h) {
      const double fh = centered_frequency(h, dims.h);
      for (std::size_t w = 0; w < dims.w; ++w) {
        const double fw = centered_frequency(w, dims.w);
        m.values[(t * dims.h + h) * dims.w + w] =
            static_cast<T>(profile(ft * ft + fh * fh + fw * fw));
      }
    }
  }
  return m;
}
}  // namespace detail

/// exp(-r^2 / (2 d0^2)) over the centered grid.
template <class T>
SpectralMask<T> gaussian_lowpass_mask(GridDims dims, T d0) {
  detail::require(d0 > T(0), "gaussian_lowpass_mask: cutoff must be positive, got ", d0);
  const double s = 2.0 * static_cast<double>(d0) * static_cast<double>(d0);
  return detail::radial_mask<T>(dims, d0, [s](double r2) { return std::exp(-r2 / s); });
}

/// Hard cutoff: 1 inside radius d0, 0 outside.
template <class T>
SpectralMask<T> ideal_lowpass_mask(GridDims dims, T d0) {
  detail::require(d0 > T(0), "ideal_lowpass_mask: cutoff must be positive, got ", d0);
  const double r2max = static_cast<double>(d0) * static_cast<double>(d0);
  return detail::radial_mask<T>(dims, d0, [r2max](double r2) { return r2 <= r2max ? 1.0 : 0.0; });
}

struct RecombineOptions {
  // Divides each bin by sqrt(M^2 + (1-M)^2) so two independent white inputs
  // recombine to unit spectral variance.
  bool renormalize_variance = false;
};

/// F^-1(M * F(low_src) + (1 - M) * F(high_src)).
template <class T>
Tensor4<T> freq_recombine(const Tensor4<T>& low_src, const Tensor4<T>& high_src,
                          const SpectralMask<T>& mask, RecombineOptions opts = {},
                          T* max_imag = nullptr) {
  detail::require(low_src.dims() == high_src.dims(), "freq_recombine: dims ",
                  low_src.dims().str(), " vs ", high_src.dims().str());
  detail::require(GridDims::of(low_src.dims()) == mask.dims,
                  "freq_recombine: mask grid does not match latent ", low_src.dims().str());
  auto lo = fft3(low_src);
  auto hi = fft3(high_src);
  const std::size_t vol = mask.dims.size();
  for (std::size_t i = 0; i < lo.data.size(); ++i) {
    const T m = mask.values[i % vol];
    auto mixed = m * lo.data[i] + (T(1) - m) * hi.data[i];
    if (opts.renormalize_variance) mixed /= std::sqrt(m * m + (T(1) - m) * (T(1) - m));
    lo.data[i] = mixed;
  }
  return ifft3(lo, max_imag);
}

/// Share of spectral energy passed by the mask (weights M^2), averaged over
/// channels. Zero-energy channels are skipped.
template <class T>
T low_freq_energy_ratio(const Tensor4<T>& x, const SpectralMask<T>& mask) {
  detail::require(GridDims::of(x.dims()) == mask.dims,
                  "low_freq_energy_ratio: mask grid does not match latent ", x.dims().str());
  const auto spec = fft3(x);
  const std::size_t vol = mask.dims.size();
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < x.dims().c; ++c) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < vol; ++i) {
      const double e = std::norm(std::complex<double>(spec.data[c * vol + i]));
      const double m = mask.values[i];
      num += m * m * e;
      den += e;
    }
    if (den > 0) {
      sum += num / den;
      ++used;
    }
  }
  detail::require(used > 0, "low_freq_energy_ratio: input has zero energy");
  return static_cast<T>(sum / static_cast<double>(used));
}

/// Mean Pearson correlation between adjacent frames, per channel. Pairs with a
/// constant frame are skipped.
template <class T>
T temporal_correlation(const Tensor4<T>& x) {
  const Dims4& d = x.dims();
  detail::require(d.t >= 2, "temporal_correlation: needs at least 2 frames, got ", d.t);
  const std::size_t hw = d.h * d.w;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t t = 0; t + 1 < d.t; ++t) {
      const T* a = &x(c, t, 0, 0);
      const T* b = &x(c, t + 1, 0, 0);
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < hw; ++i) ma += a[i], mb += b[i];
      ma /= static_cast<double>(hw);
      mb /= static_cast<double>(hw);
      double sab = 0, saa = 0, sbb = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
      }
      if (saa <= 0 || sbb <= 0) continue;
      sum += sab / std::sqrt(saa * sbb);
      ++used;
    }
  detail::require(used > 0, "temporal_correlation: every adjacent frame pair is constant");
  return static_cast<T>(sum / static_cast<double>(used));
}

}  // namespace fastinit
