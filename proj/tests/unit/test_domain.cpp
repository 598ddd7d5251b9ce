#include <cstdlib>
#include <fstream>

#include "ntksel/digest.hpp"
#include "ntksel/domain.hpp"
#include "support.hpp"

using namespace ntksel;

TEST_CASE("default config matches the selection defaults") {
  const PipelineConfig c;
  CHECK(c.n_select == 9000);
  CHECK(c.preselect_size == 36000);
  CHECK(c.knn_k == 9000);
  CHECK(c.proj_dim == 8192);
  CHECK(c.grad_scale == 1e-5);
  CHECK(c.normalize_by_seq_len);
  CHECK(validate_config(c) == c);
  CHECK(PipelineConfig::for_selection(9000) == c);
}

TEST_CASE("for_selection derives M and K") {
  const auto c = PipelineConfig::for_selection(10);
  CHECK(c.preselect_size == 40);
  CHECK(c.knn_k == 10);
  CHECK(PipelineConfig::for_selection(1).knn_k == 1);
}

TEST_CASE("validate_config rejects violated constraints") {
  PipelineConfig c;
  c.n_select = 10;
  c.preselect_size = 5;
  c.knn_k = 1;
  try {
    validate_config(c);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config);
    CHECK(std::string(e.what()).find("preselect_size") != std::string::npos);
  }
  c = PipelineConfig::for_selection(10);
  c.knn_k = c.preselect_size + 1;
  CHECK_ERROR_CODE(validate_config(c), ErrorCode::config);
  c = PipelineConfig::for_selection(10);
  c.proj_dim = 0;
  CHECK_ERROR_CODE(validate_config(c), ErrorCode::config);
  c = PipelineConfig::for_selection(10);
  c.grad_scale = 0.0;
  CHECK_ERROR_CODE(validate_config(c), ErrorCode::config);
  c.grad_scale = std::nan("");
  CHECK_ERROR_CODE(validate_config(c), ErrorCode::config);
  c = PipelineConfig::for_selection(10);
  c.n_select = 0;
  CHECK_ERROR_CODE(validate_config(c), ErrorCode::config);
}

TEST_CASE("minimal legal config and idempotence") {
  PipelineConfig c;
  c.n_select = c.preselect_size = c.knn_k = 1;
  c.proj_dim = 1;
  CHECK(validate_config(c) == c);
  CHECK(validate_config(validate_config(c)) == validate_config(c));
}

TEST_CASE("SampleId ordering, formatting and parsing") {
  const SampleId a{"alpaca", 2}, b{"alpaca", 10}, c{"dolly", 0};
  CHECK(a < b);
  CHECK(b < c);
  CHECK(a.str() == "alpaca:2");
  CHECK(SampleId::parse("alpaca:2") == a);
  CHECK(SampleId::parse("a:b:7") == SampleId{"a:b", 7});
  CHECK(SampleId::parse(":3") == SampleId{"", 3});
  CHECK_ERROR_CODE(SampleId::parse("nocolon"), ErrorCode::config);
  CHECK_ERROR_CODE(SampleId::parse("x:"), ErrorCode::config);
  CHECK_ERROR_CODE(SampleId::parse("x:1a"), ErrorCode::config);
  CHECK(SampleIdHash{}(a) == SampleIdHash{}(SampleId{"alpaca", 2}));
}

TEST_CASE("manifest JSON round trip and digest verification") {
  testing::TempDir dir;
  const std::string data = dir.file("data.bin");
  {
    std::ofstream(data) << "payload";
  }
  RunManifest m;
  m.config = PipelineConfig::for_selection(3);
  m.domain_count = 4;
  m.candidate_count = 12;
  m.feature_file_digests.push_back({data, sha256_file(data)});
  m.created_at = format_utc(0);
  CHECK(m.created_at == "1970-01-01T00:00:00Z");

  const std::string path = dir.file("manifest.json");
  const std::string h1 = write_manifest(path, m);
  CHECK(h1 == sha256_file(path));
  CHECK(read_manifest(path) == m);
  CHECK_NOTHROW(verify_manifest_digests(m));
  // Same logical content -> same bytes.
  CHECK(write_manifest(dir.file("again.json"), m) == h1);

  {
    std::ofstream(data) << "changed";
  }
  CHECK_ERROR_CODE(verify_manifest_digests(m), ErrorCode::io);
}

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  CHECK(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("reproducible timestamp honours SOURCE_DATE_EPOCH") {
  ::setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(reproducible_timestamp({}) == "1970-01-02T00:00:00Z");
  ::unsetenv("SOURCE_DATE_EPOCH");
  CHECK(reproducible_timestamp({}) == "1970-01-01T00:00:00Z");
}
