#include "ntksel/synthetic.hpp"

#include <algorithm>
#include <chrono>
#include <random>

#include "ntksel/parallel.hpp"
#include "ntksel/projection.hpp"

namespace ntksel {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

SyntheticSample draw(std::mt19937_64& rng, const std::vector<Eigen::VectorXd>& means, int generator,
                     const SyntheticConfig& cfg, SampleId id) {
  std::uniform_int_distribution<std::uint32_t> len(1, cfg.max_tokens);
  std::normal_distribution<double> noise(0.0, cfg.token_noise);
  SyntheticSample s;
  s.id = std::move(id);
  s.generator = generator;
  s.seq_len = len(rng);
  const auto& mu = means[static_cast<std::size_t>(generator)];
  for (std::uint32_t t = 0; t < s.seq_len; ++t) {
    for (Eigen::Index i = 0; i < mu.size(); ++i) s.tokens.push_back(mu[i] + noise(rng));
  }
  return s;
}

}  // namespace

SyntheticCorpus make_corpus(const SyntheticConfig& cfg) {
  if (cfg.n_generators < 2) throw Error(ErrorCode::config, "need at least two generators");
  if (cfg.n_domain < 1 || cfg.n_candidates < 1) throw Error(ErrorCode::config, "domain and candidate sets must be non-empty");
  if (!(cfg.matched_fraction >= 0.0 && cfg.matched_fraction <= 1.0)) {
    throw Error(ErrorCode::config, "matched_fraction must lie in [0, 1]");
  }
  if (cfg.max_tokens < 1) throw Error(ErrorCode::config, "max_tokens must be >= 1");

  std::mt19937_64 rng(cfg.seed);
  ToyNetwork net = ToyNetwork::random(cfg.net, rng());
  const ToyNetwork teacher = ToyNetwork::random(cfg.net, rng());
  const std::size_t d = cfg.net.layer_dims.front();
  std::normal_distribution<double> gauss(0.0, cfg.mean_scale);
  std::vector<Eigen::VectorXd> means(static_cast<std::size_t>(cfg.n_generators), Eigen::VectorXd(d));
  for (auto& m : means) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = gauss(rng);
  }

  SyntheticCorpus c{net, {}, {}, 0.0};
  for (std::size_t i = 0; i < cfg.n_domain; ++i) c.domain.push_back(draw(rng, means, 0, cfg, {"domain", i}));
  const auto n_matched = static_cast<std::size_t>(std::llround(cfg.matched_fraction * static_cast<double>(cfg.n_candidates)));
  std::vector<int> gens(cfg.n_candidates, 0);
  std::uniform_int_distribution<int> other(1, cfg.n_generators - 1);
  for (std::size_t j = n_matched; j < cfg.n_candidates; ++j) gens[j] = other(rng);
  std::shuffle(gens.begin(), gens.end(), rng);
  for (std::size_t j = 0; j < cfg.n_candidates; ++j) c.candidates.push_back(draw(rng, means, gens[j], cfg, {"cand", j}));

  const auto t0 = Clock::now();
  if (cfg.warmup_steps > 0) {
    Dataset task;
    for (const auto& s : c.domain) {
      for (std::uint32_t t = 0; t < s.seq_len; ++t) {
        Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(s.tokens.data() + t * d, static_cast<Eigen::Index>(d));
        Eigen::VectorXd y = forward(teacher, {x.data(), d});
        task.push_back({std::move(x), std::move(y)});
      }
    }
    for (std::size_t s = 0; s < cfg.warmup_steps; ++s) adapter_gd_step(c.net, task, cfg.warmup_lr);
  }
  c.warmup_seconds = seconds_since(t0);
  return c;
}

FeatureSpec feature_spec(const PipelineConfig& cfg) {
  return {true, cfg.proj_seed, cfg.proj_dim, cfg.grad_scale, cfg.normalize_by_seq_len};
}

EmbeddingRecord embed_sample(const ToyNetwork& net, const SyntheticSample& s) {
  const Eigen::VectorXd e = embed(net, s.tokens);
  EmbeddingRecord r;
  r.id = s.id;
  r.vector.resize(static_cast<std::size_t>(e.size()));
  for (Eigen::Index i = 0; i < e.size(); ++i) r.vector[static_cast<std::size_t>(i)] = static_cast<float>(e[i]);
  return r;
}

Eigen::VectorXd raw_gradient_feature(const ToyNetwork& net, const SyntheticSample& s, const FeatureSpec& spec) {
  Eigen::VectorXd g = sequence_summed_gradient(net, s.tokens);
  if (spec.normalize_by_seq_len) g /= static_cast<double>(s.seq_len);
  return g * spec.grad_scale;
}

FeatureFileHeader gradient_file_header(const ToyNetwork& net, const FeatureSpec& spec) {
  const auto p_lora = net.adapter_param_count();
  const auto dim = spec.project ? spec.proj_dim : static_cast<std::uint32_t>(p_lora);
  return gradient_header(dim, spec.project ? spec.proj_seed : 0, p_lora, spec.grad_scale, spec.normalize_by_seq_len,
                         spec.project);
}

FeatureSet gradient_features(const ToyNetwork& net, const std::vector<SyntheticSample>& samples,
                             const FeatureSpec& spec) {
  FeatureSet fs;
  fs.header = gradient_file_header(net, spec);
  const auto p_lora = static_cast<Eigen::Index>(net.adapter_param_count());
  Eigen::MatrixXd raw(static_cast<Eigen::Index>(samples.size()), p_lora);
  parallel_for(samples.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      raw.row(static_cast<Eigen::Index>(i)) = raw_gradient_feature(net, samples[i], spec).transpose();
    }
  });
  Eigen::MatrixXd feats;
  if (spec.project) {
    // Rows in slabs keep the GEMM working set modest.
    feats.resize(raw.rows(), spec.proj_dim);
    const ProjectionSpec ps{spec.proj_seed, static_cast<std::uint64_t>(p_lora), spec.proj_dim, ScaleMode::raw};
    constexpr Eigen::Index kSlab = 512;
    for (Eigen::Index r0 = 0; r0 < raw.rows(); r0 += kSlab) {
      const Eigen::Index rows = std::min(kSlab, raw.rows() - r0);
      feats.middleRows(r0, rows) = project_batch(ps, raw.middleRows(r0, rows));
    }
  } else {
    feats = std::move(raw);
  }
  fs.records.resize(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& r = fs.records[i];
    r.id = samples[i].id;
    r.seq_len = samples[i].seq_len;
    r.vector.resize(static_cast<std::size_t>(feats.cols()));
    for (Eigen::Index k = 0; k < feats.cols(); ++k) {
      r.vector[static_cast<std::size_t>(k)] = static_cast<float>(feats(static_cast<Eigen::Index>(i), k));
    }
  }
  return fs;
}

EmbeddingSet embeddings(const ToyNetwork& net, const std::vector<SyntheticSample>& samples) {
  EmbeddingSet es;
  es.records.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) es.records[i] = embed_sample(net, samples[i]);
  });
  es.header = embedding_header(static_cast<std::uint32_t>(es.records.empty() ? 1 : es.records.front().vector.size()));
  return es;
}

PipelineData build_pipeline_data(const SyntheticCorpus& corpus, const FeatureSpec& spec, StageTimings* timings) {
  PipelineData data;
  auto t0 = Clock::now();
  data.domain_embeddings = embeddings(corpus.net, corpus.domain);
  data.candidate_embeddings = embeddings(corpus.net, corpus.candidates);
  const double t_embed = seconds_since(t0);
  t0 = Clock::now();
  data.domain_gradients = gradient_features(corpus.net, corpus.domain, spec);
  data.candidate_gradients = gradient_features(corpus.net, corpus.candidates, spec);
  const double t_grad = seconds_since(t0);
  if (timings != nullptr) {
    const std::size_t n = corpus.domain.size() + corpus.candidates.size();
    auto& w = timings->at("warm-up");
    w = {"warm-up", corpus.warmup_seconds, false, "adapter steps on " + std::to_string(corpus.domain.size()) + " domain samples"};
    timings->at("embedding") = {"embedding", t_embed, false, std::to_string(n) + " samples embedded"};
    timings->at("gradient") = {"gradient", t_grad, false,
                               std::to_string(n) + " gradients" +
                                   (spec.project ? ", projected to p = " + std::to_string(spec.proj_dim) : "")};
  }
  return data;
}

}  // namespace ntksel
