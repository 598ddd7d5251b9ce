#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ntksel/digest.hpp"
#include "ntksel/feature_store.hpp"
#include "support.hpp"

using namespace ntksel;

namespace {

std::vector<FeatureRecord> three_records() {
  return {
      {{"alpaca", 0}, 5, {0.5f, -1.25f, 3.0f, 1e-7f}},
      {{"alpaca", 1}, 1, {0.0f, 0.0f, -0.0f, 2.5f}},
      {{"dolly", 9}, 12, {1e30f, -1e-30f, 7.0f, -7.0f}},
  };
}

void patch_byte(const std::string& path, std::streamoff offset, char value) {
  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(offset);
  f.put(value);
}

}  // namespace

TEST_CASE("gradient records round trip bitwise") {
  testing::TempDir dir;
  const auto path = dir.file("g.bin");
  const auto records = three_records();
  const auto header = gradient_header(4, 7, 1000, 1e-5, true);
  const std::string hash = write_features(path, header, records);
  CHECK(hash == sha256_file(path));

  const FeatureSet set = read_feature_set(path);
  CHECK(set.header.kind == FeatureKind::gradient);
  CHECK(set.header.dim == 4);
  CHECK(set.header.count == 3);
  CHECK(set.header.proj_seed == 7);
  CHECK(set.header.source_param_dim == 1000);
  CHECK(set.header.grad_scale == 1e-5);
  CHECK(set.header.has_flag(header_flags::seq_len_normalized));
  CHECK(set.header.has_flag(header_flags::grad_scaled));
  CHECK(set.header.has_flag(header_flags::projected));
  REQUIRE(set.records.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(set.records[i].id == records[i].id);
    CHECK(set.records[i].seq_len == records[i].seq_len);
    CHECK(std::memcmp(set.records[i].vector.data(), records[i].vector.data(), 16) == 0);
  }
  // -0.0f keeps its sign bit.
  CHECK(std::signbit(set.records[1].vector[2]));
}

TEST_CASE("embedding records round trip") {
  testing::TempDir dir;
  const auto path = dir.file("e.bin");
  std::vector<EmbeddingRecord> recs{{{"x", 3}, {1.f, 2.f, 3.f}}, {{"", 0}, {-1.f, 0.f, 9.f}}};
  write_embeddings(path, embedding_header(3), recs);
  const auto set = read_embedding_set(path);
  CHECK(set.header.kind == FeatureKind::embedding);
  CHECK(set.header.proj_seed == 0);
  CHECK(set.header.source_param_dim == 0);
  CHECK(set.records == recs);
}

TEST_CASE("streaming reader yields records in order") {
  testing::TempDir dir;
  const auto path = dir.file("g.bin");
  const auto records = three_records();
  write_features(path, gradient_header(4, 7, 1000, 1e-5, true), records);
  FeatureReader r(path);
  CHECK(r.header().count == 3);
  FeatureRecord rec;
  std::size_t i = 0;
  while (r.next(rec)) CHECK(rec == records[i++]);
  CHECK(i == 3);
  CHECK_FALSE(r.next(rec));
}

TEST_CASE("empty stream gives a valid header-only file") {
  testing::TempDir dir;
  const auto path = dir.file("empty.bin");
  write_features(path, gradient_header(4, 0, 10, 1.0, false), {});
  CHECK(std::filesystem::file_size(path) == kFeatureHeaderSize);
  const auto set = read_feature_set(path);
  CHECK(set.header.count == 0);
  CHECK(set.records.empty());
}

TEST_CASE("writer validation") {
  testing::TempDir dir;
  const auto header = gradient_header(4, 7, 1000, 1e-5, true);
  {
    FeatureWriter w(dir.file("nan.bin"), header);
    FeatureRecord bad{{"a", 0}, 1, {1.f, std::numeric_limits<float>::quiet_NaN(), 0.f, 0.f}};
    CHECK_ERROR_CODE(w.write(bad), ErrorCode::non_finite_value);
    FeatureRecord inf{{"a", 0}, 1, {1.f, std::numeric_limits<float>::infinity(), 0.f, 0.f}};
    CHECK_ERROR_CODE(w.write(inf), ErrorCode::non_finite_value);
  }
  {
    FeatureWriter w(dir.file("dim.bin"), header);
    CHECK_ERROR_CODE(w.write(FeatureRecord{{"a", 0}, 1, {1.f, 2.f}}), ErrorCode::dim_mismatch);
  }
  {
    FeatureWriter w(dir.file("dup.bin"), header);
    w.write(FeatureRecord{{"a", 0}, 1, {1.f, 2.f, 3.f, 4.f}});
    CHECK_ERROR_CODE(w.write(FeatureRecord{{"a", 0}, 2, {1.f, 2.f, 3.f, 4.f}}), ErrorCode::duplicate_id);
    // A rejected record leaves the file consistent.
    w.finish();
    CHECK(read_feature_set(dir.file("dup.bin")).records.size() == 1);
  }
  {
    FeatureWriter w(dir.file("seq.bin"), header);
    CHECK_ERROR_CODE(w.write(FeatureRecord{{"a", 0}, 0, {1.f, 2.f, 3.f, 4.f}}), ErrorCode::config);
  }
  {
    FeatureWriter w(dir.file("kind.bin"), embedding_header(4));
    CHECK_ERROR_CODE(w.write(FeatureRecord{{"a", 0}, 1, {1.f, 2.f, 3.f, 4.f}}), ErrorCode::bad_kind);
  }
  CHECK_ERROR_CODE(FeatureWriter(dir.file("zero.bin"), embedding_header(0)), ErrorCode::dim_mismatch);
  CHECK_ERROR_CODE(FeatureWriter("/nonexistent_dir/x.bin", header), ErrorCode::io);
}

TEST_CASE("reader rejects corrupt files") {
  testing::TempDir dir;
  const auto path = dir.file("g.bin");
  write_features(path, gradient_header(4, 7, 1000, 1e-5, true), three_records());
  const auto size = std::filesystem::file_size(path);

  SUBCASE("bad magic") {
    patch_byte(path, 0, 'X');
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::bad_magic);
  }
  SUBCASE("unknown kind") {
    patch_byte(path, 8, 9);
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::bad_kind);
  }
  SUBCASE("truncated mid-record") {
    std::filesystem::resize_file(path, size - 3);
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::truncated_file);
  }
  SUBCASE("truncated header") {
    std::filesystem::resize_file(path, 20);
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::truncated_file);
  }
  SUBCASE("trailing bytes") {
    std::ofstream(path, std::ios::binary | std::ios::app) << "junk";
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::trailing_data);
  }
  SUBCASE("dim zero in header") {
    for (int i = 12; i < 16; ++i) patch_byte(path, i, 0);
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::dim_mismatch);
  }
  // First record: u16 tag length at 56, "alpaca", u64 index, u32 seq_len,
  // values from 76. Second record's index sits at 92 + 2 + 6.
  SUBCASE("non-finite value on disk") {
    patch_byte(path, 78, static_cast<char>(0xc0));
    patch_byte(path, 79, static_cast<char>(0x7f));
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::non_finite_value);
  }
  SUBCASE("duplicate id on disk") {
    patch_byte(path, 100, 0);
    CHECK_ERROR_CODE(read_feature_set(path), ErrorCode::duplicate_id);
  }
  SUBCASE("wrong reader kind") {
    CHECK_ERROR_CODE(read_embedding_set(path), ErrorCode::bad_kind);
  }
  SUBCASE("missing file names the path") {
    try {
      read_feature_set(dir.file("absent.bin"));
      FAIL("expected io error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::io);
      CHECK(std::string(e.what()).find("absent.bin") != std::string::npos);
    }
  }
}

TEST_CASE("identical content gives identical bytes") {
  testing::TempDir dir;
  const auto header = gradient_header(4, 7, 1000, 1e-5, true);
  const auto h1 = write_features(dir.file("a.bin"), header, three_records());
  const auto h2 = write_features(dir.file("b.bin"), header, three_records());
  CHECK(h1 == h2);
  auto other = three_records();
  other[0].vector[0] = 0.75f;
  CHECK(write_features(dir.file("c.bin"), header, other) != h1);
}
