// PND1: prompt / random-noise / refined-noise triplets.
//
// Layout (all integers little-endian, all reals IEEE-754 binary32 LE):
//
//   header (33 bytes)
//     "PND1" | version u32 = 1 | record_count u32 | C T H W u32 |
//     embedding_dim u32 | compression u8 (0 = none)
//   record (fixed stride 8 + 4*D + 8*C*T*H*W + 4)
//     prompt_id u64 | embedding D x f32 | z_rand CTHW x f32 |
//     z_refined CTHW x f32 | crc32 u32 over the preceding record bytes
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "binary_io.hpp"
#include "prompt.hpp"
#include "refine.hpp"
#include "rng.hpp"
#include "spectral.hpp"
#include "tensor.hpp"

namespace fastinit {

struct DatasetHeader {
  static constexpr char kMagic[4] = {'P', 'N', 'D', '1'};
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kSize = 33;

  std::uint32_t version = kVersion;
  std::uint32_t record_count = 0;
  Dims4 dims{4, 8, 16, 16};
  std::uint32_t embedding_dim = 64;
  std::uint8_t compression = 0;

  std::uint64_t record_stride() const {
    return 8 + 4ull * embedding_dim + 8ull * dims.size() + 4;
  }
  std::uint64_t file_size() const { return kSize + record_stride() * record_count; }

  void encode(ByteWriter& w) const {
    for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
    w.u32(version);
    w.u32(record_count);
    w.u32(static_cast<std::uint32_t>(dims.c));
    w.u32(static_cast<std::uint32_t>(dims.t));
    w.u32(static_cast<std::uint32_t>(dims.h));
    w.u32(static_cast<std::uint32_t>(dims.w));
    w.u32(embedding_dim);
    w.u8(compression);
  }

  static DatasetHeader decode(ByteReader& r) {
    if (r.text(4) != std::string(kMagic, 4)) throw FormatError("bad magic: not a PND1 file", 0);
    DatasetHeader h;
    h.version = r.u32();
    if (h.version != kVersion)
      throw FormatError("unsupported PND1 version " + std::to_string(h.version), 4);
    h.record_count = r.u32();
    h.dims.c = r.u32();
    h.dims.t = r.u32();
    h.dims.h = r.u32();
    h.dims.w = r.u32();
    if (!h.dims.positive()) throw FormatError("header dims must be positive, got " + h.dims.str(), 12);
    h.embedding_dim = r.u32();
    if (h.embedding_dim == 0) throw FormatError("header embedding_dim must be positive", 28);
    h.compression = r.u8();
    if (h.compression != 0)
      throw FormatError("compression flag " + std::to_string(h.compression) + " is not supported", 32);
    return h;
  }
};

struct NoisePairRecord {
  std::uint64_t prompt_id = 0;
  PromptEmbedding embedding;
  Tensor4<float> z_rand;
  Tensor4<float> z_refined;

  friend bool operator==(const NoisePairRecord&, const NoisePairRecord&) = default;
};

namespace detail {
inline void check_record(const DatasetHeader& h, const NoisePairRecord& r, std::size_t index) {
  detail::require(r.embedding.dim() == h.embedding_dim, "record ", index, ": embedding dim ",
                  r.embedding.dim(), " != header ", h.embedding_dim);
  detail::require(r.z_rand.dims() == h.dims && r.z_refined.dims() == h.dims, "record ", index,
                  ": latent dims ", r.z_rand.dims().str(), "/", r.z_refined.dims().str(),
                  " != header ", h.dims.str());
  for (float v : r.embedding.values)
    detail::require(std::isfinite(v), "record ", index, ": non-finite embedding");
  detail::require(r.z_rand.all_finite() && r.z_refined.all_finite(), "record ", index,
                  ": non-finite latent payload");
}
}  // namespace detail

/// Streams records into a PND1 file; the record count is patched on finish().
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& path, DatasetHeader header)
      : header_(header), file_(path) {
    header_.record_count = 0;
    ByteWriter w;
    header_.encode(w);
    file_.write(w.data());
  }

  void append(const NoisePairRecord& r) {
    detail::check_record(header_, r, header_.record_count);
    buf_.clear();
    buf_.u64(r.prompt_id);
    buf_.f32s<float>(r.embedding.values);
    buf_.f32s<float>(r.z_rand.data());
    buf_.f32s<float>(r.z_refined.data());
    buf_.u32(Crc32::of(buf_.data()));
    file_.write(buf_.data());
    ++header_.record_count;
  }

  void finish() {
    ByteWriter w;
    w.u32(header_.record_count);
    file_.write_at(8, w.data());
    file_.commit();
  }

  const DatasetHeader& header() const { return header_; }

 private:
  DatasetHeader header_;
  AtomicFile file_;
  ByteWriter buf_;
};

/// Writes all records; every record is validated before any byte is written.
inline void write_dataset(const std::filesystem::path& path, const DatasetHeader& header,
                          std::span<const NoisePairRecord> records) {
  detail::require(!path.empty(), "write_dataset: empty path");
  detail::require(header.dims.positive() && header.embedding_dim > 0,
                  "write_dataset: invalid header");
  detail::require(header.compression == 0, "write_dataset: compression ",
                  int(header.compression), " is not supported");
  for (std::size_t i = 0; i < records.size(); ++i) detail::check_record(header, records[i], i);
  DatasetWriter w(path, header);
  for (const auto& r : records) w.append(r);
  w.finish();
}

/// Random-access and sequential reader with per-record CRC validation.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path) : path_(path) {
    detail::require(!path.empty(), "read_dataset: empty path");
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open dataset '" + path.string() + "'");
    std::error_code ec;
    const std::uint64_t actual = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat dataset '" + path.string() + "': " + ec.message());
    std::vector<std::uint8_t> head(DatasetHeader::kSize);
    in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
    if (static_cast<std::size_t>(in_.gcount()) < head.size())
      throw FormatError("truncated header: expected " + std::to_string(DatasetHeader::kSize) +
                            " bytes, file has " + std::to_string(actual),
                        actual);
    ByteReader r(head);
    header_ = DatasetHeader::decode(r);
    const std::uint64_t expected = header_.file_size();
    if (actual != expected)
      throw FormatError("dataset length mismatch: expected " + std::to_string(expected) +
                            " bytes for " + std::to_string(header_.record_count) +
                            " records, file has " + std::to_string(actual),
                        std::min(actual, expected));
  }

  const DatasetHeader& header() const { return header_; }
  std::size_t size() const { return header_.record_count; }

  /// Reads record `index` directly via the fixed stride.
  NoisePairRecord read(std::size_t index) {
    detail::require(index < size(), "record index ", index, " out of range (", size(), " records)");
    const std::uint64_t stride = header_.record_stride();
    const std::uint64_t offset = DatasetHeader::kSize + stride * index;
    buf_.resize(stride);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(offset));
    in_.read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(stride));
    if (static_cast<std::uint64_t>(in_.gcount()) != stride)
      throw FormatError("record " + std::to_string(index) + ": short read", offset, index);
    const std::uint32_t computed = Crc32::of(std::span<const std::uint8_t>(buf_).first(stride - 4));
    ByteReader tail(std::span<const std::uint8_t>(buf_).last(4), offset + stride - 4);
    const std::uint32_t stored = tail.u32();
    if (computed != stored) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "record %zu: CRC mismatch (stored 0x%08x, computed 0x%08x) at byte offset %llu",
                    index, stored, computed, static_cast<unsigned long long>(offset));
      throw FormatError(msg, offset, index);
    }
    ByteReader r(buf_, offset);
    NoisePairRecord rec;
    rec.prompt_id = r.u64();
    rec.embedding.prompt_id = rec.prompt_id;
    rec.embedding.values.resize(header_.embedding_dim);
    r.f32s(std::span<float>(rec.embedding.values));
    rec.z_rand = Tensor4<float>(header_.dims);
    r.f32s(rec.z_rand.data());
    rec.z_refined = Tensor4<float>(header_.dims);
    r.f32s(rec.z_refined.data());
    return rec;
  }

  /// Sequential iteration; empty once every record has been returned.
  std::optional<NoisePairRecord> next() {
    if (cursor_ >= size()) return std::nullopt;
    return read(cursor_++);
  }
  void rewind() { cursor_ = 0; }

  std::vector<NoisePairRecord> read_all() {
    std::vector<NoisePairRecord> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(read(i));
    return out;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  DatasetHeader header_;
  std::vector<std::uint8_t> buf_;
  std::size_t cursor_ = 0;
};

inline DatasetReader read_dataset(const std::filesystem::path& path) { return DatasetReader(path); }

/// One line per prompt, blank lines skipped, trailing CR stripped.
inline std::vector<std::string> read_prompts_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompts file '" + path.string() + "'");
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  return out;
}

struct GenerationEntry {
  std::uint64_t prompt_id = 0;
  double delta_temporal_correlation = 0;
  double delta_low_freq_ratio = 0;
};

struct GenerationReport {
  std::vector<GenerationEntry> entries;
  double mean_delta_temporal_correlation = 0;
  double mean_delta_low_freq_ratio = 0;
  double seconds = 0;
};

struct GenerationOptions {
  Dims4 dims{4, 8, 16, 16};
  std::size_t embedding_dim = 64;
  std::uint64_t seed = 0;  // record i uses seed + i
};

/// Per-record seeds: z_rand from `seed + i`, the refinement stream from its
/// splitmix64 image.
inline RngSeed record_noise_seed(std::uint64_t base, std::size_t index) { return {base + index}; }
inline RngSeed record_refine_seed(std::uint64_t base, std::size_t index) {
  return {mix_seed(base + index)};
}

template <class T = real_t>
GenerationReport generate_pndata(const std::vector<std::string>& prompts, const GenerationOptions& opts,
                                 RefineConfig cfg, const Denoiser<T>& denoiser,
                                 const std::filesystem::path& out_path) {
  detail::require(!prompts.empty(), "generate_pndata: no prompts");
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  DatasetHeader header;
  header.dims = opts.dims;
  header.embedding_dim = static_cast<std::uint32_t>(opts.embedding_dim);
  const auto mask = gaussian_lowpass_mask<T>(GridDims::of(opts.dims), static_cast<T>(cfg.cutoff));

  GenerationReport report;
  DatasetWriter writer(out_path, header);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const PromptEmbedding emb = embed_prompt(prompts[i], opts.embedding_dim);
    const Tensor4<T> z_rand = sample_gaussian<T>(opts.dims, record_noise_seed(opts.seed, i));
    cfg.seed = record_refine_seed(opts.seed, i);
    const Tensor4<T> z_ref = refine_iterative(z_rand, emb, cfg, denoiser);
    GenerationEntry e{emb.prompt_id,
                      static_cast<double>(temporal_correlation(z_ref) - temporal_correlation(z_rand)),
                      static_cast<double>(low_freq_energy_ratio(z_ref, mask) - low_freq_energy_ratio(z_rand, mask))};
    report.entries.push_back(e);
    writer.append({emb.prompt_id, emb, z_rand.template cast<float>(), z_ref.template cast<float>()});
  }
  writer.finish();
  for (const auto& e : report.entries) {
    report.mean_delta_temporal_correlation += e.delta_temporal_correlation;
    report.mean_delta_low_freq_ratio += e.delta_low_freq_ratio;
  }
  report.mean_delta_temporal_correlation /= static_cast<double>(report.entries.size());
  report.mean_delta_low_freq_ratio /= static_cast<double>(report.entries.size());
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct RecordStats {
  double std_rand = 0, std_refined = 0;
  double tc_rand = 0, tc_refined = 0;
  double lfr_rand = 0, lfr_refined = 0;
};

struct StatsReport {
  DatasetHeader header;
  std::vector<RecordStats> records;
  std::optional<RecordStats> mean;  // absent for an empty dataset
};

inline double population_std(std::span<const double> v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

inline RecordStats record_stats(const Tensor4<double>& z_rand, const Tensor4<double>& z_refined,
                                const SpectralMask<double>& mask) {
  return {population_std(z_rand.data()),         population_std(z_refined.data()),
          temporal_correlation(z_rand),           temporal_correlation(z_refined),
          low_freq_energy_ratio(z_rand, mask),    low_freq_energy_ratio(z_refined, mask)};
}

/// Per-record and mean statistics, low-frequency ratios at cutoff 0.25.
inline StatsReport dataset_stats(const std::filesystem::path& path, double cutoff = 0.25) {
  DatasetReader reader(path);
  StatsReport rep;
  rep.header = reader.header();
  const auto mask = gaussian_lowpass_mask<double>(GridDims::of(rep.header.dims), cutoff);
  while (auto rec = reader.next())
    rep.records.push_back(
        record_stats(rec->z_rand.cast<double>(), rec->z_refined.cast<double>(), mask));
  if (!rep.records.empty()) {
    RecordStats m;
    for (const auto& r : rep.records) {
      m.std_rand += r.std_rand, m.std_refined += r.std_refined;
      m.tc_rand += r.tc_rand, m.tc_refined += r.tc_refined;
      m.lfr_rand += r.lfr_rand, m.lfr_refined += r.lfr_refined;
    }
    const double n = static_cast<double>(rep.records.size());
    m.std_rand /= n, m.std_refined /= n, m.tc_rand /= n, m.tc_refined /= n, m.lfr_rand /= n,
        m.lfr_refined /= n;
    rep.mean = m;
  }
  return rep;
}

}  // namespace fastinit
