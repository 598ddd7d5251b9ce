#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntksel/domain.hpp"
#include "ntksel/feature_store.hpp"
#include "ntksel/kernel.hpp"
#include "ntksel/preselect.hpp"

namespace ntksel {

struct UtilityScores {
  std::vector<SampleId> cand_ids;
  std::vector<double> scores;
};

/// Sorted by (score desc, id asc). `cosine` is an optional diagnostic:
/// the mean over domain rows of the kernel entry divided by both norms.
struct SelectionResult {
  std::vector<SampleId> selected;
  std::vector<double> scores;
  std::optional<std::vector<double>> cosine;
  std::string manifest_ref;  // SHA-256 of the manifest file
};

/// scores[j] = mean over rows of km.values(:, j), summed in row order.
UtilityScores utility_scores(const KernelMatrix& km);

SelectionResult select_top_n(const UtilityScores& scores, std::uint64_t n);

/// Five timing buckets: warm-up, embedding, knn, gradient, ntk_selection.
/// Stages whose work happened before the engine was invoked (feature
/// export) are marked external and carry only their I/O time.
struct StageTiming {
  std::string stage;
  double seconds = 0.0;
  bool external = false;
  std::string work;
};

struct StageTimings {
  std::array<StageTiming, 5> stages{{{"warm-up", 0.0, true, ""},
                                     {"embedding", 0.0, true, ""},
                                     {"knn", 0.0, false, ""},
                                     {"gradient", 0.0, true, ""},
                                     {"ntk_selection", 0.0, false, ""}}};

  StageTiming& at(std::string_view stage);
  double total() const;
};

nlohmann::ordered_json to_json(const StageTimings& t);
std::string format_timings(const StageTimings& t);

struct PipelineInputs {
  std::string domain_embeddings;
  std::string candidate_embeddings;
  std::string domain_gradients;
  std::string candidate_gradients;
};

struct PipelineData {
  EmbeddingSet domain_embeddings;
  EmbeddingSet candidate_embeddings;
  FeatureSet domain_gradients;
  FeatureSet candidate_gradients;
};

struct PipelineOptions {
  bool cosine_column = false;
};

struct PipelineRun {
  SelectionResult result;
  RunManifest manifest;
  RelevanceTable relevance;
  std::vector<SampleId> preselected;
  StageTimings timings;
};

/// Checks that gradient headers agree with `cfg` (SeedMismatch,
/// NormalizationMismatch, DimMismatch).
void check_gradient_header(const PipelineConfig& cfg, const FeatureFileHeader& header, const std::string& what);

/// Reads the four files, pre-selects on embeddings, streams only the
/// pre-selected candidate gradients, scores and takes the Top-N. Failures
/// are rethrown as StageError naming the stage.
PipelineRun run_pipeline(const PipelineConfig& cfg, const PipelineInputs& inputs, const PipelineOptions& opts = {});

/// Same composition over in-memory data. The manifest lists no files.
PipelineRun run_pipeline(const PipelineConfig& cfg, const PipelineData& data, const PipelineOptions& opts = {});

/// Writes the manifest, then the JSON-lines result whose header line
/// carries the manifest's SHA-256. Returns the result file's SHA-256.
std::string write_pipeline_outputs(PipelineRun& run, const std::string& result_path, const std::string& manifest_path);

std::string write_selection_result(const std::string& path, const SelectionResult& result);
SelectionResult read_selection_result(const std::string& path);

}  // namespace ntksel
