// Seeded Gaussian sampling.
//
// Stream definition (version 1): std::mt19937_64 seeded with the 64-bit seed;
// each uniform is (word >> 11) * 2^-53; normals come in Box-Muller pairs
// r*cos(2*pi*u2), r*sin(2*pi*u2) with r = sqrt(-2 ln(1 - u1)). mt19937_64's
// output sequence is fixed by the C++ standard, so the stream only depends on
// the platform's libm for log/sqrt/sin/cos.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "tensor.hpp"

namespace fastinit {

struct RngSeed {
  std::uint64_t value = 0;
};

class GaussianStream {
 public:
  static constexpr int kVersion = 1;

  explicit GaussianStream(RngSeed seed) : engine_(seed.value) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <class T = real_t>
Tensor4<T> sample_gaussian(Dims4 dims, RngSeed seed) {
  detail::require(dims.positive(), "sample_gaussian: dims must be positive, got ", dims.str());
  Tensor4<T> out(dims);
  GaussianStream stream(seed);
  for (auto& v : out.storage()) v = static_cast<T>(stream.normal());
  return out;
}

template <class T = real_t>
Tensor4<T> sample_gaussian(Dims4 dims, GaussianStream& stream) {
  detail::require(dims.positive(), "sample_gaussian: dims must be positive, got ", dims.str());
  Tensor4<T> out(dims);
  for (auto& v : out.storage()) v = static_cast<T>(stream.normal());
  return out;
}

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace fastinit
