#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ntksel/error.hpp"

namespace ntksel {

/// Identifies one sample across every pipeline stage. Ordering is
/// lexicographic by (dataset_tag, index) and drives all tie-breaking.
struct SampleId {
  std::string dataset_tag;
  std::uint64_t index = 0;

  friend auto operator<=>(const SampleId&, const SampleId&) = default;
  friend bool operator==(const SampleId&, const SampleId&) = default;

  /// "tag:index"; parse() splits on the last ':'.
  std::string str() const;
  static SampleId parse(std::string_view text);
};

struct SampleIdHash {
  std::size_t operator()(const SampleId& id) const noexcept;
};

struct PipelineConfig {
  std::uint64_t n_select = 9000;
  std::uint64_t preselect_size = 36000;
  std::uint64_t knn_k = 9000;
  std::uint32_t proj_dim = 8192;
  std::uint64_t proj_seed = 0;
  double grad_scale = 1e-5;
  bool normalize_by_seq_len = true;

  /// M = 4N and K = M/4 (floored, at least 1); everything else default.
  static PipelineConfig for_selection(std::uint64_t n_select);

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

/// Throws Error(config) naming the first violated constraint.
PipelineConfig validate_config(const PipelineConfig& cfg);

struct FileDigest {
  std::string path;
  std::string sha256;

  friend bool operator==(const FileDigest&, const FileDigest&) = default;
};

struct RunManifest {
  PipelineConfig config;
  std::uint64_t domain_count = 0;
  std::uint64_t candidate_count = 0;
  std::vector<FileDigest> feature_file_digests;
  std::string created_at;  // ISO-8601 UTC, "YYYY-MM-DDTHH:MM:SSZ"

  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

nlohmann::ordered_json to_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& j);

/// Writes the manifest as pretty UTF-8 JSON with a trailing newline and
/// returns the SHA-256 of the written bytes.
std::string write_manifest(const std::string& path, const RunManifest& manifest);
RunManifest read_manifest(const std::string& path);

/// Re-hashes every referenced file. Throws Error(io) on the first mismatch.
void verify_manifest_digests(const RunManifest& manifest);

/// Formats seconds since the epoch as "YYYY-MM-DDTHH:MM:SSZ".
std::string format_utc(std::int64_t epoch_seconds);

/// Manifest timestamp for a run over `inputs`: SOURCE_DATE_EPOCH when set,
/// otherwise the newest modification time among the inputs, so repeated
/// runs over the same files stay byte-identical.
std::string reproducible_timestamp(const std::vector<std::string>& inputs);

}  // namespace ntksel
