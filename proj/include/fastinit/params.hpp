// Named parameter storage and the VNP1 checkpoint container.
//
// VNP1 layout (little-endian):
//   "VNP1" | u32 version | u32 meta_len | meta (key=value lines) | u32 meta_crc
//   u32 blob_count, then per blob:
//     u32 name_len | name | u32 rank | u32 dims[rank] | f32 values | u32 crc
// Each blob CRC covers the blob bytes from name_len through the last value.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "binary_io.hpp"
#include "tensor.hpp"

namespace fastinit {

template <class T>
struct Param {
  std::string name;
  ad::Shape shape;
  std::vector<T> value;
};

/// Insertion-ordered collection of named tensors.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, ad::Shape shape, std::vector<T> value) {
    detail::require(!index_.contains(name), "duplicate parameter '", name, "'");
    detail::require(ad::numel(shape) == value.size(), "parameter '", name, "': shape holds ",
                    ad::numel(shape), " values, got ", value.size());
    index_[name] = params_.size();
    params_.push_back({name, std::move(shape), std::move(value)});
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  Param<T>& at(const std::string& name) { return params_[lookup(name)]; }
  const Param<T>& at(const std::string& name) const { return params_[lookup(name)]; }

  std::vector<Param<T>>& all() { return params_; }
  const std::vector<Param<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.shape, std::vector<U>(p.value.begin(), p.value.end()));
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      const auto &x = a.params_[i], &y = b.params_[i];
      if (x.name != y.name || x.shape != y.shape || x.value != y.value) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    detail::require(it != index_.end(), "unknown parameter '", name, "'");
    return it->second;
  }

  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using Meta = std::map<std::string, std::string>;

struct Checkpoint {
  static constexpr char kMagic[4] = {'V', 'N', 'P', '1'};
  static constexpr std::uint32_t kVersion = 1;

  Meta meta;
  ParamStore<float> params;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.text(std::string(Checkpoint::kMagic, 4));
  w.u32(Checkpoint::kVersion);
  std::string meta;
  for (const auto& [k, v] : ck.meta) {
    detail::require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
                    "checkpoint meta entry '", k, "' contains a separator character");
    meta += k + "=" + v + "\n";
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.text(meta);
  w.u32(Crc32::of(std::span(reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size())));
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  ByteWriter blob;
  for (const auto& p : ck.params.all()) {
    blob.clear();
    blob.u32(static_cast<std::uint32_t>(p.name.size()));
    blob.text(p.name);
    blob.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) blob.u32(static_cast<std::uint32_t>(d));
    blob.f32s(std::span<const float>(p.value));
    w.bytes(blob.data());
    w.u32(Crc32::of(blob.data()));
  }
  return w.data();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.text(4) != std::string(Checkpoint::kMagic, 4))
    throw FormatError("bad magic: not a VNP1 checkpoint", 0);
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion)
    throw FormatError("unsupported VNP1 version " + std::to_string(version), 4);
  Checkpoint ck;
  const std::uint32_t meta_len = r.u32();
  const std::uint64_t meta_at = r.offset();
  const std::string meta = r.text(meta_len);
  if (r.u32() != Crc32::of(std::span(reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size())))
    throw FormatError("checkpoint metadata CRC mismatch", meta_at);
  std::size_t start = 0;
  while (start < meta.size()) {
    const std::size_t end = meta.find('\n', start);
    const std::string line = meta.substr(start, end - start);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed metadata line '" + line + "'", meta_at + start);
    ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t blob_at = r.offset();
    try {
      const std::uint32_t name_len = r.u32();
      std::string name = r.text(name_len);
      const std::uint32_t rank = r.u32();
      if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank), blob_at, i);
      ad::Shape shape(rank);
      for (auto& d : shape) d = r.u32();
      const std::size_t n = ad::numel(shape);
      if (n > r.remaining() / 4) throw FormatError("blob larger than the remaining file", blob_at, i);
      std::vector<float> values(n);
      r.f32s(std::span<float>(values));
      const std::uint64_t end = r.offset();
      const std::uint32_t stored = r.u32();
      const std::uint32_t computed = Crc32::of(bytes.subspan(blob_at, end - blob_at));
      if (stored != computed)
        throw FormatError("parameter blob " + std::to_string(i) + " ('" + name + "') CRC mismatch", blob_at, i);
      if (ck.params.contains(name)) throw FormatError("duplicate parameter '" + name + "'", blob_at, i);
      ck.params.add(name, std::move(shape), std::move(values));
    } catch (const FormatError& e) {
      if (e.record()) throw;
      throw FormatError("parameter blob " + std::to_string(i) + ": " + e.what(), e.offset(), i);
    }
  }
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last blob", r.offset());
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_checkpoint(bytes);
}

}  // namespace fastinit
