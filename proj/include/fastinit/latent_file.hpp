// LAT1: a single latent as "LAT1" | C T H W (u32 LE) | C*T*H*W f32 LE.
#pragma once

#include <filesystem>
#include <vector>

#include "binary_io.hpp"
#include "tensor.hpp"

namespace fastinit {

inline constexpr std::size_t kLatentHeaderSize = 20;

inline std::vector<std::uint8_t> encode_latent(const Tensor4<float>& z) {
  ByteWriter w;
  w.text("LAT1");
  for (std::size_t i = 0; i < 4; ++i) w.u32(static_cast<std::uint32_t>(z.dims()[i]));
  w.f32s<float>(z.data());
  return w.data();
}

inline Tensor4<float> decode_latent(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kLatentHeaderSize) throw FormatError("truncated LAT1 header", bytes.size());
  ByteReader r(bytes);
  if (r.text(4) != "LAT1") throw FormatError("bad magic: not a LAT1 file", 0);
  Dims4 d;
  for (std::size_t i = 0; i < 4; ++i) d.at(i) = r.u32();
  if (!d.positive()) throw FormatError("LAT1 dims must be positive, got " + d.str(), 4);
  if (r.remaining() != 4 * d.size())
    throw FormatError("LAT1 payload holds " + std::to_string(r.remaining()) + " bytes, dims " + d.str() +
                          " need " + std::to_string(4 * d.size()),
                      kLatentHeaderSize);
  Tensor4<float> z(d);
  r.f32s(z.data());
  return z;
}

inline void save_latent(const std::filesystem::path& path, const Tensor4<float>& z) {
  write_file_atomic(path, encode_latent(z));
}

inline Tensor4<float> load_latent(const std::filesystem::path& path) { return decode_latent(read_file(path)); }

}  // namespace fastinit
