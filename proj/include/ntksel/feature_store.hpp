#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ntksel/domain.hpp"

namespace ntksel {

// On-disk layout (little-endian), documented bit-exactly in docs/format.md:
//
//   offset  size  field
//   0       8     magic "NTKSEL01"
//   8       1     kind (0 gradient, 1 embedding, 2 kernel, 3 toynet)
//   9       1     flags (see header_flags)
//   10      2     reserved, zero
//   12      4     dim (u32)
//   16      8     count (u64)
//   24      8     proj_seed (u64)
//   32      8     source_param_dim (u64)
//   40      8     grad_scale (f64; factor already applied, 0 when none)
//   48      4     extension length E (u32)
//   52      4     reserved, zero
//   56      E     extension bytes (kind-specific)
//   56+E    ...   count records:
//                   u16 tag length | tag UTF-8 | u64 index | u32 seq_len |
//                   dim values (f32 for gradient/embedding, f64 otherwise)

inline constexpr char kFeatureMagic[8] = {'N', 'T', 'K', 'S', 'E', 'L', '0', '1'};
inline constexpr std::size_t kFeatureHeaderSize = 56;

enum class FeatureKind : std::uint8_t { gradient = 0, embedding = 1, kernel = 2, toynet = 3 };

std::string_view to_string(FeatureKind kind) noexcept;

namespace header_flags {
inline constexpr std::uint8_t seq_len_normalized = 1u << 0;
inline constexpr std::uint8_t grad_scaled = 1u << 1;
inline constexpr std::uint8_t projected = 1u << 2;
}  // namespace header_flags

struct FeatureFileHeader {
  FeatureKind kind = FeatureKind::gradient;
  std::uint8_t flags = 0;
  std::uint32_t dim = 0;
  std::uint64_t count = 0;  // filled in by the writer
  std::uint64_t proj_seed = 0;
  std::uint64_t source_param_dim = 0;
  double grad_scale = 0.0;
  std::vector<std::uint8_t> extension;

  bool has_flag(std::uint8_t f) const noexcept { return (flags & f) != 0; }
  /// 4 for gradient/embedding files, 8 for kernel/toynet containers.
  std::size_t value_width() const noexcept;

  friend bool operator==(const FeatureFileHeader&, const FeatureFileHeader&) = default;
};

/// Header for a gradient feature file whose vectors were projected with
/// `proj_seed` from `source_param_dim` adapter parameters, divided by the
/// token count (if `normalized`) and multiplied by `grad_scale`.
FeatureFileHeader gradient_header(std::uint32_t dim, std::uint64_t proj_seed,
                                  std::uint64_t source_param_dim, double grad_scale,
                                  bool normalized, bool projected = true);
FeatureFileHeader embedding_header(std::uint32_t dim);

struct FeatureRecord {
  SampleId id;
  std::uint32_t seq_len = 1;
  std::vector<float> vector;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct EmbeddingRecord {
  SampleId id;
  std::vector<float> vector;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

/// A full gradient file in memory.
struct FeatureSet {
  FeatureFileHeader header;
  std::vector<FeatureRecord> records;
};

struct EmbeddingSet {
  FeatureFileHeader header;
  std::vector<EmbeddingRecord> records;
};

/// Generic record used by the 64-bit containers (kernel, toynet).
struct WideRecord {
  SampleId id;
  std::uint32_t seq_len = 0;
  std::vector<double> vector;
};

/// Streams records to disk. The header's count is patched on finish(), so
/// callers need not know it up front. Validation happens per record before
/// any bytes are written for it.
class FeatureWriter {
 public:
  FeatureWriter(const std::string& path, FeatureFileHeader header);
  FeatureWriter(const FeatureWriter&) = delete;
  FeatureWriter& operator=(const FeatureWriter&) = delete;
  ~FeatureWriter();

  void write(const FeatureRecord& record);
  void write(const EmbeddingRecord& record);
  void write(const WideRecord& record);

  /// Closes the file and returns its SHA-256.
  std::string finish();

  std::uint64_t written() const noexcept { return count_; }

 private:
  void write_record(const SampleId& id, std::uint32_t seq_len, std::span<const float> f32,
                    std::span<const double> f64);

  std::string path_;
  FeatureFileHeader header_;
  std::ofstream out_;
  std::unordered_set<SampleId, SampleIdHash> seen_;
  std::uint64_t count_ = 0;
  bool finished_ = false;
};

/// Sequential reader; the header is fully validated in the constructor,
/// before any record is produced. Memory use is one record at a time.
class FeatureReader {
 public:
  explicit FeatureReader(const std::string& path);

  const FeatureFileHeader& header() const noexcept { return header_; }
  const std::string& path() const noexcept { return path_; }

  /// Each returns false once `count` records have been consumed (and
  /// checks for trailing bytes at that point).
  bool next(FeatureRecord& out);
  bool next(EmbeddingRecord& out);
  bool next(WideRecord& out);

 private:
  bool read_record(SampleId& id, std::uint32_t& seq_len, std::vector<float>* f32,
                   std::vector<double>* f64);
  void read_exact(void* dst, std::size_t n, const char* what);

  std::string path_;
  std::ifstream in_;
  FeatureFileHeader header_;
  std::unordered_set<SampleId, SampleIdHash> seen_;
  std::uint64_t consumed_ = 0;
};

std::string write_features(const std::string& path, FeatureFileHeader header,
                           std::span<const FeatureRecord> records);
std::string write_embeddings(const std::string& path, FeatureFileHeader header,
                             std::span<const EmbeddingRecord> records);

FeatureSet read_feature_set(const std::string& path);
EmbeddingSet read_embedding_set(const std::string& path);

/// Reads only the header (validated).
FeatureFileHeader read_header(const std::string& path);

// Little-endian packing helpers shared by the kernel and toynet containers.
namespace wire {
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_id(std::vector<std::uint8_t>& out, const SampleId& id);

/// Bounds-checked cursor over a byte buffer; throws TruncatedFile.
class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  SampleId id();
  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> take(std::size_t n);
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace wire

}  // namespace ntksel
