// 1-D complex FFT: iterative radix-2 for powers of two, Bluestein's chirp-z
// for every other length. Forward transforms are unnormalized.
#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace fastinit {

template <class T>
class FftPlan {
 public:
  using cpx = std::complex<T>;

  explicit FftPlan(std::size_t n) : n_(n) {
    if (n_ <= 1) return;
    if (is_pow2(n_)) {
      init_radix2(n_, bitrev_, twiddles_);
      return;
    }
    // Bluestein: x_k w_k convolved with conj(w) over a power-of-two grid.
    m_ = 1;
    while (m_ < 2 * n_ - 1) m_ <<= 1;
    init_radix2(m_, bitrev_, twiddles_);
    chirp_.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      // k^2 mod 2n keeps the phase argument small.
      const std::size_t k2 = (k * k) % (2 * n_);
      const double ang = -std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n_);
      chirp_[k] = cpx(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
    }
    kernel_.assign(m_, cpx(0));
    kernel_[0] = std::conj(chirp_[0]);
    for (std::size_t k = 1; k < n_; ++k) kernel_[k] = kernel_[m_ - k] = std::conj(chirp_[k]);
    radix2(kernel_.data(), false);
  }

  std::size_t size() const { return n_; }

  /// In-place transform of n values spaced `stride` apart.
  void transform(cpx* data, std::size_t stride, bool inverse) const {
    if (n_ <= 1) return;
    std::vector<cpx>& buf = scratch();
    if (m_ == 0) {
      buf.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) buf[i] = data[i * stride];
      radix2(buf.data(), inverse);
    } else {
      bluestein(data, stride, inverse, buf);
    }
    const T scale = inverse ? T(1) / static_cast<T>(n_) : T(1);
    for (std::size_t i = 0; i < n_; ++i) data[i * stride] = buf[i] * scale;
  }

 private:
  static bool is_pow2(std::size_t n) { return (n & (n - 1)) == 0; }

  static void init_radix2(std::size_t n, std::vector<std::size_t>& rev, std::vector<cpx>& tw) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    rev.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      rev[i] = r;
    }
    tw.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      tw[k] = cpx(static_cast<T>(std::cos(ang)), static_cast<T>(std::sin(ang)));
    }
  }

  // Unnormalized radix-2 transform over the plan's power-of-two length.
  void radix2(cpx* a, bool inverse) const {
    const std::size_t n = bitrev_.size();
    for (std::size_t i = 0; i < n; ++i)
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, step = n / len;
      for (std::size_t i = 0; i < n; i += len)
        for (std::size_t k = 0; k < half; ++k) {
          // Spelled out: std::complex operator* carries an Annex G NaN
          // recovery path that blocks vectorization.
          const T wr = twiddles_[k * step].real();
          const T wi = inverse ? -twiddles_[k * step].imag() : twiddles_[k * step].imag();
          const T xr = a[i + k + half].real(), xi = a[i + k + half].imag();
          const T vr = xr * wr - xi * wi, vi = xr * wi + xi * wr;
          const T ur = a[i + k].real(), ui = a[i + k].imag();
          a[i + k] = cpx(ur + vr, ui + vi);
          a[i + k + half] = cpx(ur - vr, ui - vi);
        }
    }
  }

  void bluestein(const cpx* data, std::size_t stride, bool inverse, std::vector<cpx>& out) const {
    std::vector<cpx> a(m_, cpx(0));
    for (std::size_t k = 0; k < n_; ++k) {
      cpx x = data[k * stride];
      if (inverse) x = std::conj(x);
      a[k] = x * chirp_[k];
    }
    radix2(a.data(), false);
    for (std::size_t k = 0; k < m_; ++k) a[k] *= kernel_[k];
    radix2(a.data(), true);
    const T inv_m = T(1) / static_cast<T>(m_);
    out.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      cpx y = a[k] * inv_m * chirp_[k];
      out[k] = inverse ? std::conj(y) : y;
    }
  }

  static std::vector<cpx>& scratch() {
    thread_local std::vector<cpx> buf;
    return buf;
  }

  std::size_t n_ = 0, m_ = 0;
  std::vector<std::size_t> bitrev_;
  std::vector<cpx> twiddles_, chirp_, kernel_;
};

}  // namespace fastinit
