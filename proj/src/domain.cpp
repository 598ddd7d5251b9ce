#include "ntksel/domain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ntksel/digest.hpp"

namespace ntksel {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::config: return "ConfigError";
    case ErrorCode::dim_mismatch: return "DimMismatch";
    case ErrorCode::non_finite_value: return "NonFiniteValue";
    case ErrorCode::duplicate_id: return "DuplicateId";
    case ErrorCode::io: return "IoError";
    case ErrorCode::bad_magic: return "BadMagic";
    case ErrorCode::bad_kind: return "BadKind";
    case ErrorCode::truncated_file: return "TruncatedFile";
    case ErrorCode::trailing_data: return "TrailingData";
    case ErrorCode::seed_mismatch: return "SeedMismatch";
    case ErrorCode::normalization_mismatch: return "NormalizationMismatch";
    case ErrorCode::missing_feature: return "MissingFeature";
    case ErrorCode::overlap: return "OverlapError";
    case ErrorCode::coverage: return "CoverageError";
    case ErrorCode::non_finite_gradient: return "NonFiniteGradient";
    case ErrorCode::size_cap_exceeded: return "SizeCapExceeded";
    case ErrorCode::no_hidden_layer: return "NoHiddenLayer";
    case ErrorCode::divergence: return "DivergenceError";
    case ErrorCode::degenerate_variance: return "DegenerateVariance";
    case ErrorCode::zero_norm: return "ZeroNorm";
    case ErrorCode::empty_candidates: return "EmptyCandidates";
    case ErrorCode::m_too_large: return "MTooLarge";
    case ErrorCode::n_too_large: return "NTooLarge";
    case ErrorCode::empty_matrix: return "EmptyMatrix";
    case ErrorCode::negative_cosine: return "NegativeCosine";
    case ErrorCode::sparse_checkpoints: return "SparseCheckpoints";
    case ErrorCode::singular_system: return "SingularSystem";
    case ErrorCode::asymmetric_kernel: return "AsymmetricKernel";
    case ErrorCode::demo_assertion_failed: return "DemoAssertionFailed";
    case ErrorCode::identity_check_failed: return "IdentityCheckFailed";
  }
  return "Error";
}

std::string SampleId::str() const {
  return dataset_tag + ":" + std::to_string(index);
}

SampleId SampleId::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) {
    throw Error(ErrorCode::config, "malformed sample id '" + std::string(text) + "'");
  }
  SampleId id;
  id.dataset_tag = std::string(text.substr(0, colon));
  const auto digits = text.substr(colon + 1);
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), id.index);
  if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty()) {
    throw Error(ErrorCode::config, "malformed sample id '" + std::string(text) + "'");
  }
  return id;
}

std::size_t SampleIdHash::operator()(const SampleId& id) const noexcept {
  const std::size_t h = std::hash<std::string>{}(id.dataset_tag);
  return h ^ (std::hash<std::uint64_t>{}(id.index) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
}

PipelineConfig PipelineConfig::for_selection(std::uint64_t n_select) {
  PipelineConfig cfg;
  cfg.n_select = n_select;
  cfg.preselect_size = 4 * n_select;
  cfg.knn_k = std::max<std::uint64_t>(1, cfg.preselect_size / 4);
  return cfg;
}

PipelineConfig validate_config(const PipelineConfig& cfg) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::config, what); };
  if (cfg.n_select < 1) fail("n_select must be positive");
  if (cfg.preselect_size < 1) fail("preselect_size must be positive");
  if (cfg.knn_k < 1) fail("knn_k must be positive");
  if (cfg.proj_dim < 1) fail("proj_dim must be positive");
  if (cfg.preselect_size < cfg.n_select) fail("preselect_size < n_select");
  if (cfg.knn_k > cfg.preselect_size) fail("knn_k > preselect_size");
  if (!(cfg.grad_scale > 0.0) || !std::isfinite(cfg.grad_scale)) fail("grad_scale must be positive and finite");
  return cfg;
}

nlohmann::ordered_json to_json(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["n_select"] = cfg.n_select;
  j["preselect_size"] = cfg.preselect_size;
  j["knn_k"] = cfg.knn_k;
  j["proj_dim"] = cfg.proj_dim;
  j["proj_seed"] = cfg.proj_seed;
  j["grad_scale"] = cfg.grad_scale;
  j["normalize_by_seq_len"] = cfg.normalize_by_seq_len;
  return j;
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig cfg;
  cfg.n_select = j.at("n_select").get<std::uint64_t>();
  cfg.preselect_size = j.at("preselect_size").get<std::uint64_t>();
  cfg.knn_k = j.at("knn_k").get<std::uint64_t>();
  cfg.proj_dim = j.at("proj_dim").get<std::uint32_t>();
  cfg.proj_seed = j.at("proj_seed").get<std::uint64_t>();
  cfg.grad_scale = j.at("grad_scale").get<double>();
  cfg.normalize_by_seq_len = j.at("normalize_by_seq_len").get<bool>();
  return cfg;
}

nlohmann::ordered_json to_json(const RunManifest& manifest) {
  nlohmann::ordered_json j;
  j["config"] = to_json(manifest.config);
  j["domain_count"] = manifest.domain_count;
  j["candidate_count"] = manifest.candidate_count;
  auto digests = nlohmann::ordered_json::array();
  for (const auto& d : manifest.feature_file_digests) {
    digests.push_back({{"path", d.path}, {"sha256", d.sha256}});
  }
  j["feature_file_digests"] = std::move(digests);
  j["created_at"] = manifest.created_at;
  return j;
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  m.config = config_from_json(j.at("config"));
  m.domain_count = j.at("domain_count").get<std::uint64_t>();
  m.candidate_count = j.at("candidate_count").get<std::uint64_t>();
  for (const auto& d : j.at("feature_file_digests")) {
    m.feature_file_digests.push_back({d.at("path").get<std::string>(), d.at("sha256").get<std::string>()});
  }
  m.created_at = j.at("created_at").get<std::string>();
  return m;
}

std::string write_manifest(const std::string& path, const RunManifest& manifest) {
  const std::string text = to_json(manifest).dump(2) + "\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  try {
    return manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "malformed manifest '" + path + "': " + e.what());
  }
}

void verify_manifest_digests(const RunManifest& manifest) {
  for (const auto& d : manifest.feature_file_digests) {
    const std::string actual = sha256_file(d.path);
    if (actual != d.sha256) {
      throw Error(ErrorCode::io, "digest mismatch for '" + d.path + "': manifest " + d.sha256 + ", disk " + actual);
    }
  }
}

std::string format_utc(std::int64_t epoch_seconds) {
  const std::time_t t = static_cast<std::time_t>(epoch_seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string reproducible_timestamp(const std::vector<std::string>& inputs) {
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env != nullptr && *env != '\0') {
    return format_utc(std::strtoll(env, nullptr, 10));
  }
  namespace fs = std::filesystem;
  std::int64_t newest = 0;
  for (const auto& path : inputs) {
    std::error_code ec;
    const auto ftime = fs::last_write_time(path, ec);
    if (ec) continue;
    const auto sys = std::chrono::file_clock::to_sys(ftime);
    newest = std::max<std::int64_t>(
        newest, std::chrono::duration_cast<std::chrono::seconds>(sys.time_since_epoch()).count());
  }
  return format_utc(newest);
}

}  // namespace ntksel
