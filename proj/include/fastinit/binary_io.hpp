// Little-endian encoding helpers, CRC-32 and atomic file output shared by the
// PND1, VNP1 and LAT1 containers.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastinit {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed container contents. `offset` is the byte position of the fault;
/// `record` is set when the fault belongs to a specific record.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset, std::optional<std::uint64_t> record = {})
      : std::runtime_error(what), offset_(offset), record_(record) {}
  std::uint64_t offset() const { return offset_; }
  std::optional<std::uint64_t> record() const { return record_; }

 private:
  std::uint64_t offset_;
  std::optional<std::uint64_t> record_;
};

// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
class Crc32 {
 public:
  void update(std::span<const std::uint8_t> bytes) {
    static const auto table = make_table();
    for (std::uint8_t b : bytes) state_ = table[(state_ ^ b) & 0xffu] ^ (state_ >> 8);
  }
  std::uint32_t value() const { return state_ ^ 0xffffffffu; }

  static std::uint32_t of(std::span<const std::uint8_t> bytes) {
    Crc32 c;
    c.update(bytes);
    return c.value();
  }

 private:
  static std::array<std::uint32_t, 256> make_table() {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }
  std::uint32_t state_ = 0xffffffffu;
};

/// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  template <class T>
  void f32s(std::span<const T> values) {
    buf_.reserve(buf_.size() + 4 * values.size());
    for (const T& v : values) f32(static_cast<float>(v));
  }

  const std::vector<std::uint8_t>& data() const { return buf_; }
  std::size_t size() const { return buf_.size(); }
  void clear() { buf_.clear(); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader over a byte span; `base` is the file
/// offset of the span's first byte, used in error messages.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::uint64_t base = 0) : bytes_(bytes), base_(base) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string text(std::size_t n) {
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  template <class T>
  void f32s(std::span<T> out) {
    for (T& v : out) v = static_cast<T>(f32());
  }

  std::uint64_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw FormatError("unexpected end of data: needed " + std::to_string(n) + " bytes at offset " +
                            std::to_string(offset()) + ", " + std::to_string(remaining()) + " left",
                        offset());
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> bytes_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

/// Writes to "<path>.tmp" and renames over `path` on commit(); an uncommitted
/// file is removed on destruction.
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path)
      : path_(std::move(path)), tmp_(path_.string() + ".tmp") {
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + tmp_.string() + "' for writing");
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  void write(std::span<const std::uint8_t> bytes) {
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out_) throw IoError("write to '" + tmp_.string() + "' failed");
  }
  void write_at(std::uint64_t offset, std::span<const std::uint8_t> bytes) {
    const auto here = out_.tellp();
    out_.seekp(static_cast<std::streamoff>(offset));
    write(bytes);
    out_.seekp(here);
  }
  void commit() {
    out_.flush();
    out_.close();
    if (!out_) throw IoError("closing '" + tmp_.string() + "' failed");
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
    if (ec) throw IoError("cannot rename '" + tmp_.string() + "' to '" + path_.string() + "': " + ec.message());
    committed_ = true;
  }

 private:
  std::filesystem::path path_, tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  AtomicFile f(path);
  f.write(bytes);
  f.commit();
}

}  // namespace fastinit
