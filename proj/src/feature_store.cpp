#include "ntksel/feature_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "ntksel/digest.hpp"

namespace ntksel {

std::string_view to_string(FeatureKind kind) noexcept {
  switch (kind) {
    case FeatureKind::gradient: return "gradient";
    case FeatureKind::embedding: return "embedding";
    case FeatureKind::kernel: return "kernel";
    case FeatureKind::toynet: return "toynet";
  }
  return "unknown";
}

std::size_t FeatureFileHeader::value_width() const noexcept {
  return (kind == FeatureKind::gradient || kind == FeatureKind::embedding) ? 4 : 8;
}

FeatureFileHeader gradient_header(std::uint32_t dim, std::uint64_t proj_seed,
                                  std::uint64_t source_param_dim, double grad_scale,
                                  bool normalized, bool projected) {
  FeatureFileHeader h;
  h.kind = FeatureKind::gradient;
  h.dim = dim;
  h.proj_seed = proj_seed;
  h.source_param_dim = source_param_dim;
  h.grad_scale = grad_scale;
  if (normalized) h.flags |= header_flags::seq_len_normalized;
  if (grad_scale > 0.0) h.flags |= header_flags::grad_scaled;
  if (projected) h.flags |= header_flags::projected;
  return h;
}

FeatureFileHeader embedding_header(std::uint32_t dim) {
  FeatureFileHeader h;
  h.kind = FeatureKind::embedding;
  h.dim = dim;
  return h;
}

namespace wire {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_id(std::vector<std::uint8_t>& out, const SampleId& id) {
  if (id.dataset_tag.size() > 0xffff) {
    throw Error(ErrorCode::config, "dataset tag longer than 65535 bytes");
  }
  put_u16(out, static_cast<std::uint16_t>(id.dataset_tag.size()));
  out.insert(out.end(), id.dataset_tag.begin(), id.dataset_tag.end());
  put_u64(out, id.index);
}

std::span<const std::uint8_t> Cursor::take(std::size_t n) {
  if (bytes_.size() - pos_ < n) throw Error(ErrorCode::truncated_file, "extension block ends early");
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint16_t Cursor::u16() {
  auto b = take(2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t Cursor::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

std::uint64_t Cursor::u64() {
  auto b = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

double Cursor::f64() { return std::bit_cast<double>(u64()); }

SampleId Cursor::id() {
  SampleId id;
  const auto len = u16();
  auto tag = take(len);
  id.dataset_tag.assign(tag.begin(), tag.end());
  id.index = u64();
  return id;
}

}  // namespace wire

namespace {

std::vector<std::uint8_t> encode_header(const FeatureFileHeader& h) {
  std::vector<std::uint8_t> out;
  out.reserve(kFeatureHeaderSize + h.extension.size());
  out.insert(out.end(), std::begin(kFeatureMagic), std::end(kFeatureMagic));
  out.push_back(static_cast<std::uint8_t>(h.kind));
  out.push_back(h.flags);
  wire::put_u16(out, 0);
  wire::put_u32(out, h.dim);
  wire::put_u64(out, h.count);
  wire::put_u64(out, h.proj_seed);
  wire::put_u64(out, h.source_param_dim);
  wire::put_f64(out, h.grad_scale);
  wire::put_u32(out, static_cast<std::uint32_t>(h.extension.size()));
  wire::put_u32(out, 0);
  out.insert(out.end(), h.extension.begin(), h.extension.end());
  return out;
}

bool is_wide(FeatureKind kind) { return kind == FeatureKind::kernel || kind == FeatureKind::toynet; }

}  // namespace

FeatureWriter::FeatureWriter(const std::string& path, FeatureFileHeader header)
    : path_(path), header_(std::move(header)) {
  if (header_.dim == 0) throw Error(ErrorCode::dim_mismatch, "header dim must be positive");
  if (header_.extension.size() > 0xffffffffu) throw Error(ErrorCode::config, "extension block too large");
  header_.count = 0;
  out_.open(path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw Error(ErrorCode::io, "cannot open '" + path_ + "' for writing");
  const auto bytes = encode_header(header_);
  out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out_) throw Error(ErrorCode::io, "write failed for '" + path_ + "'");
}

FeatureWriter::~FeatureWriter() {
  if (!finished_) {
    out_.close();
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
}

void FeatureWriter::write(const FeatureRecord& record) {
  if (header_.kind != FeatureKind::gradient) {
    throw Error(ErrorCode::bad_kind, "gradient record written to a " + std::string(to_string(header_.kind)) + " file");
  }
  if (record.seq_len < 1) throw Error(ErrorCode::config, "seq_len must be >= 1 for " + record.id.str());
  write_record(record.id, record.seq_len, record.vector, {});
}

void FeatureWriter::write(const EmbeddingRecord& record) {
  if (header_.kind != FeatureKind::embedding) {
    throw Error(ErrorCode::bad_kind, "embedding record written to a " + std::string(to_string(header_.kind)) + " file");
  }
  write_record(record.id, 0, record.vector, {});
}

void FeatureWriter::write(const WideRecord& record) {
  if (!is_wide(header_.kind)) {
    throw Error(ErrorCode::bad_kind, "64-bit record written to a " + std::string(to_string(header_.kind)) + " file");
  }
  write_record(record.id, record.seq_len, {}, record.vector);
}

void FeatureWriter::write_record(const SampleId& id, std::uint32_t seq_len, std::span<const float> f32,
                                 std::span<const double> f64) {
  if (finished_) throw Error(ErrorCode::io, "writer already finished");
  const std::size_t n = f32.empty() ? f64.size() : f32.size();
  if (n != header_.dim) {
    throw Error(ErrorCode::dim_mismatch,
                id.str() + " has " + std::to_string(n) + " values, header dim " + std::to_string(header_.dim));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = f32.empty() ? f64[i] : static_cast<double>(f32[i]);
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::non_finite_value, id.str() + " entry " + std::to_string(i) + " is not finite");
    }
  }
  if (!seen_.insert(id).second) throw Error(ErrorCode::duplicate_id, id.str());

  std::vector<std::uint8_t> buf;
  buf.reserve(2 + id.dataset_tag.size() + 12 + n * (f32.empty() ? 8 : 4));
  wire::put_id(buf, id);
  wire::put_u32(buf, seq_len);
  if (f32.empty()) {
    for (double v : f64) wire::put_f64(buf, v);
  } else {
    for (float v : f32) wire::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  }
  out_.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out_) throw Error(ErrorCode::io, "write failed for '" + path_ + "'");
  ++count_;
}

std::string FeatureWriter::finish() {
  if (finished_) throw Error(ErrorCode::io, "writer already finished");
  std::vector<std::uint8_t> count_bytes;
  wire::put_u64(count_bytes, count_);
  out_.seekp(16);
  out_.write(reinterpret_cast<const char*>(count_bytes.data()), 8);
  out_.close();
  if (!out_) throw Error(ErrorCode::io, "write failed for '" + path_ + "'");
  finished_ = true;
  header_.count = count_;
  return sha256_file(path_);
}

FeatureReader::FeatureReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  std::uint8_t raw[kFeatureHeaderSize];
  in_.read(reinterpret_cast<char*>(raw), sizeof raw);
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got < sizeof kFeatureMagic || std::memcmp(raw, kFeatureMagic, sizeof kFeatureMagic) != 0) {
    if (got >= sizeof kFeatureMagic || got == 0) {
      throw Error(ErrorCode::bad_magic, "'" + path + "' is not an NTKSEL01 file");
    }
    throw Error(ErrorCode::truncated_file, "'" + path + "' ends inside the header");
  }
  if (got < sizeof raw) throw Error(ErrorCode::truncated_file, "'" + path + "' ends inside the header");

  wire::Cursor c({raw + 8, sizeof raw - 8});
  const std::uint8_t kind_and_flags[2] = {raw[8], raw[9]};
  if (kind_and_flags[0] > static_cast<std::uint8_t>(FeatureKind::toynet)) {
    throw Error(ErrorCode::bad_kind, "'" + path + "' has unknown kind " + std::to_string(kind_and_flags[0]));
  }
  header_.kind = static_cast<FeatureKind>(kind_and_flags[0]);
  header_.flags = kind_and_flags[1];
  c.u16();  // kind + flags
  c.u16();  // reserved
  header_.dim = c.u32();
  header_.count = c.u64();
  header_.proj_seed = c.u64();
  header_.source_param_dim = c.u64();
  header_.grad_scale = c.f64();
  const std::uint32_t ext_len = c.u32();
  if (header_.dim == 0) throw Error(ErrorCode::dim_mismatch, "'" + path + "' declares dim 0");
  header_.extension.resize(ext_len);
  if (ext_len > 0) read_exact(header_.extension.data(), ext_len, "extension block");
}

void FeatureReader::read_exact(void* dst, std::size_t n, const char* what) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw Error(ErrorCode::truncated_file, "'" + path_ + "' ends inside " + what + " (record " +
                                               std::to_string(consumed_) + " of " + std::to_string(header_.count) + ")");
  }
}

bool FeatureReader::read_record(SampleId& id, std::uint32_t& seq_len, std::vector<float>* f32,
                                std::vector<double>* f64) {
  if (consumed_ == header_.count) {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw Error(ErrorCode::trailing_data, "'" + path_ + "' has bytes after the last record");
    }
    return false;
  }
  std::uint8_t small[8];
  read_exact(small, 2, "a record id");
  const std::size_t tag_len = small[0] | (small[1] << 8);
  id.dataset_tag.resize(tag_len);
  if (tag_len > 0) read_exact(id.dataset_tag.data(), tag_len, "a record id");
  read_exact(small, 8, "a record id");
  id.index = wire::Cursor({small, 8}).u64();
  read_exact(small, 4, "a record header");
  seq_len = wire::Cursor({small, 4}).u32();
  if (!seen_.insert(id).second) {
    throw Error(ErrorCode::duplicate_id, "'" + path_ + "' repeats " + id.str());
  }

  const std::size_t width = header_.value_width();
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(header_.dim) * width);
  read_exact(raw.data(), raw.size(), "a record vector");
  if (width == 4) {
    f32->resize(header_.dim);
    for (std::size_t i = 0; i < header_.dim; ++i) {
      const std::uint8_t* p = raw.data() + 4 * i;
      const std::uint32_t bits = p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
      (*f32)[i] = std::bit_cast<float>(bits);
      if (!std::isfinite((*f32)[i])) {
        throw Error(ErrorCode::non_finite_value, "'" + path_ + "' " + id.str() + " entry " + std::to_string(i));
      }
    }
  } else {
    f64->resize(header_.dim);
    wire::Cursor c(raw);
    for (std::size_t i = 0; i < header_.dim; ++i) {
      (*f64)[i] = c.f64();
      if (!std::isfinite((*f64)[i])) {
        throw Error(ErrorCode::non_finite_value, "'" + path_ + "' " + id.str() + " entry " + std::to_string(i));
      }
    }
  }
  ++consumed_;
  return true;
}

bool FeatureReader::next(FeatureRecord& out) {
  if (header_.kind != FeatureKind::gradient) {
    throw Error(ErrorCode::bad_kind, "'" + path_ + "' holds " + std::string(to_string(header_.kind)) + " records");
  }
  if (!read_record(out.id, out.seq_len, &out.vector, nullptr)) return false;
  if (out.seq_len < 1) throw Error(ErrorCode::config, "'" + path_ + "' " + out.id.str() + " has seq_len 0");
  return true;
}

bool FeatureReader::next(EmbeddingRecord& out) {
  if (header_.kind != FeatureKind::embedding) {
    throw Error(ErrorCode::bad_kind, "'" + path_ + "' holds " + std::string(to_string(header_.kind)) + " records");
  }
  std::uint32_t seq_len = 0;
  return read_record(out.id, seq_len, &out.vector, nullptr);
}

bool FeatureReader::next(WideRecord& out) {
  if (!is_wide(header_.kind)) {
    throw Error(ErrorCode::bad_kind, "'" + path_ + "' holds " + std::string(to_string(header_.kind)) + " records");
  }
  return read_record(out.id, out.seq_len, nullptr, &out.vector);
}

std::string write_features(const std::string& path, FeatureFileHeader header,
                           std::span<const FeatureRecord> records) {
  FeatureWriter w(path, std::move(header));
  for (const auto& r : records) w.write(r);
  return w.finish();
}

std::string write_embeddings(const std::string& path, FeatureFileHeader header,
                             std::span<const EmbeddingRecord> records) {
  FeatureWriter w(path, std::move(header));
  for (const auto& r : records) w.write(r);
  return w.finish();
}

FeatureSet read_feature_set(const std::string& path) {
  FeatureReader reader(path);
  FeatureSet set;
  set.header = reader.header();
  set.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(set.header.count, 1u << 24)));
  FeatureRecord r;
  while (reader.next(r)) set.records.push_back(r);
  return set;
}

EmbeddingSet read_embedding_set(const std::string& path) {
  FeatureReader reader(path);
  EmbeddingSet set;
  set.header = reader.header();
  set.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(set.header.count, 1u << 24)));
  EmbeddingRecord r;
  while (reader.next(r)) set.records.push_back(r);
  return set;
}

FeatureFileHeader read_header(const std::string& path) { return FeatureReader(path).header(); }

}  // namespace ntksel
