#pragma once

#include <cstdint>
#include <vector>

#include "ntksel/select.hpp"
#include "ntksel/toy_model.hpp"

namespace ntksel {

/// A toy "document": seq_len tokens of input_dim values each, drawn around
/// the mean of one generator.
struct SyntheticSample {
  SampleId id;
  int generator = 0;
  std::uint32_t seq_len = 1;
  std::vector<double> tokens;
};

struct SyntheticConfig {
  ToyConfig net;
  std::uint64_t seed = 0;
  std::size_t n_domain = 50;
  std::size_t n_candidates = 2000;
  /// Share of candidates drawn from the domain's generator (0).
  double matched_fraction = 0.1;
  int n_generators = 4;
  double mean_scale = 1.0;
  double token_noise = 0.35;
  std::uint32_t max_tokens = 4;
  std::size_t warmup_steps = 20;
  double warmup_lr = 0.05;
};

struct SyntheticCorpus {
  ToyNetwork net;  // after the warm-up phase
  std::vector<SyntheticSample> domain;
  std::vector<SyntheticSample> candidates;
  double warmup_seconds = 0.0;
};

/// Samples both sets, then runs the warm-up: a few adapter-only steps on
/// the domain tokens against a fixed random teacher network.
SyntheticCorpus make_corpus(const SyntheticConfig& cfg);

struct FeatureSpec {
  bool project = true;
  std::uint64_t proj_seed = 0;
  std::uint32_t proj_dim = 8192;
  double grad_scale = 1e-5;
  bool normalize_by_seq_len = true;
};

FeatureSpec feature_spec(const PipelineConfig& cfg);

EmbeddingRecord embed_sample(const ToyNetwork& net, const SyntheticSample& s);

/// Unprojected feature: grad_scale * sum over tokens of the summed-output
/// adapter gradient, divided by seq_len when normalising.
Eigen::VectorXd raw_gradient_feature(const ToyNetwork& net, const SyntheticSample& s, const FeatureSpec& spec);

FeatureFileHeader gradient_file_header(const ToyNetwork& net, const FeatureSpec& spec);

/// Gradient features for many samples; projection runs as one batched
/// Rademacher product (raw scaling, so inner products estimate p times the
/// unprojected ones).
FeatureSet gradient_features(const ToyNetwork& net, const std::vector<SyntheticSample>& samples,
                             const FeatureSpec& spec);
EmbeddingSet embeddings(const ToyNetwork& net, const std::vector<SyntheticSample>& samples);

/// All four inputs of the pipeline; fills the warm-up, embedding and
/// gradient timings as in-process stages.
PipelineData build_pipeline_data(const SyntheticCorpus& corpus, const FeatureSpec& spec, StageTimings* timings = nullptr);

}  // namespace ntksel
