// Shared test helpers: hand-rolled generators, naive reference kernels and
// scratch directories.
#pragma once

#include <gtest/gtest.h>
#include <unistd.h>

#include <fstream>
#include <iterator>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fastinit/tensor.hpp"

namespace testutil {

using fastinit::Dims4;
using fastinit::Matrix;
using fastinit::Tensor4;

// Small deterministic generator for property tests.
struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng); }
  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }
  template <class V>
  const typename V::value_type& pick(const V& v) {
    return v[size(0, v.size() - 1)];
  }

  Dims4 dims(std::size_t lo, std::size_t hi) { return {size(lo, hi), size(lo, hi), size(lo, hi), size(lo, hi)}; }

  template <class T = double>
  Tensor4<T> tensor(Dims4 d) {
    Tensor4<T> x(d);
    for (auto& v : x.storage()) v = static_cast<T>(normal());
    return x;
  }

  template <class T = double>
  Matrix<T> matrix(std::size_t r, std::size_t c) {
    Matrix<T> m(r, c);
    for (auto& v : m.storage()) v = static_cast<T>(normal());
    return m;
  }

  // Random n x r matrix with orthonormal columns (Gram-Schmidt, twice).
  Matrix<double> orthonormal(std::size_t n, std::size_t r) {
    Matrix<double> q = matrix(n, r);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
          double d = 0;
          for (std::size_t i = 0; i < n; ++i) d += q(i, j) * q(i, k);
          for (std::size_t i = 0; i < n; ++i) q(i, j) -= d * q(i, k);
        }
        double nn = 0;
        for (std::size_t i = 0; i < n; ++i) nn += q(i, j) * q(i, j);
        nn = std::sqrt(nn);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= nn;
      }
    return q;
  }
};

inline std::size_t idx4(const Dims4& d, std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
  return ((c * d.t + t) * d.h + h) * d.w + w;
}

// Four-nested-loop n-mode product (mode 1..4).
inline Tensor4<double> naive_mode_product(const Tensor4<double>& x, const Matrix<double>& a, int mode) {
  const Dims4 in = x.dims();
  Dims4 od = in;
  od.at(mode - 1) = a.rows();
  Tensor4<double> out(od);
  for (std::size_t c = 0; c < od.c; ++c)
    for (std::size_t t = 0; t < od.t; ++t)
      for (std::size_t h = 0; h < od.h; ++h)
        for (std::size_t w = 0; w < od.w; ++w) {
          std::size_t o[4] = {c, t, h, w};
          const std::size_t row = o[mode - 1];
          double acc = 0;
          for (std::size_t j = 0; j < in[mode - 1]; ++j) {
            std::size_t s[4] = {c, t, h, w};
            s[mode - 1] = j;
            acc += a(row, j) * x[idx4(in, s[0], s[1], s[2], s[3])];
          }
          out[idx4(od, c, t, h, w)] = acc;
        }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(std::span<const double> a) {
  double m = 0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "fastinit_";
    if (info) name += std::string(info->test_suite_name()) + "_" + info->name();
    name += "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
    for (auto& ch : name)
      if (ch == '/') ch = '_';
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path operator/(const std::string& f) const { return path_ / f; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace testutil
