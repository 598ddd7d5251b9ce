#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

#include <CLI11.hpp>

#include "ntksel/feature_store.hpp"
#include "ntksel/parallel.hpp"
#include "ntksel/preselect.hpp"
#include "ntksel/stats.hpp"

namespace ntksel::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "malformed JSON in '" + path + "': " + e.what());
  }
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      dims.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::config, "bad layer list '" + text + "'");
    }
  }
  if (dims.size() < 2) throw Error(ErrorCode::config, "layer list needs at least input and output sizes");
  return dims;
}

// Flags shared by the commands that need a PipelineConfig.
struct ConfigFlags {
  std::uint64_t n = 0;
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint32_t proj_dim = 8192;
  std::uint64_t seed = 0;
  double grad_scale = 1e-5;
  bool no_normalize = false;

  void attach(CLI::App* app, std::uint64_t default_n) {
    n = default_n;
    app->add_option("--n", n, "number of samples to select (N)")->capture_default_str();
    app->add_option("--m", m, "pre-selection size M (default 4N)");
    app->add_option("--k", k, "neighbours per domain point K (default M/4)");
    app->add_option("--proj-dim", proj_dim, "projection dimension p")->capture_default_str();
    app->add_option("--seed", seed, "projection seed")->capture_default_str();
    app->add_option("--grad-scale", grad_scale, "gradient scale factor")->capture_default_str();
    app->add_flag("--no-normalize", no_normalize, "gradients are not divided by sequence length");
  }

  PipelineConfig config() const {
    PipelineConfig c = PipelineConfig::for_selection(n);
    if (m != 0) {
      c.preselect_size = m;
      c.knn_k = std::max<std::uint64_t>(1, m / 4);
    }
    if (k != 0) c.knn_k = k;
    c.proj_dim = proj_dim;
    c.proj_seed = seed;
    c.grad_scale = grad_scale;
    c.normalize_by_seq_len = !no_normalize;
    return c;
  }
};

// --- preselect -----------------------------------------------------------

struct PreselectFlags {
  std::string domain_emb, cand_emb, out;
  ConfigFlags cfg;
};

int cmd_preselect(const PreselectFlags& f, bool as_json, std::ostream& out) {
  const PipelineConfig cfg = validate_config(f.cfg.config());
  const EmbeddingSet d = read_embedding_set(f.domain_emb);
  const EmbeddingSet c = read_embedding_set(f.cand_emb);
  const RelevanceTable t = accelerated_knn_relevance(d.records, c.records, cfg.knn_k);
  const auto sel = top_m(t, cfg.preselect_size);
  json j{{"knn_k", cfg.knn_k}, {"preselect_size", cfg.preselect_size}, {"relevance", to_json(t)}};
  json ids = json::array();
  for (const auto& id : sel) ids.push_back(id.str());
  j["preselected"] = ids;
  if (!f.out.empty()) write_text(f.out, j.dump(2) + "\n");
  if (as_json) {
    out << json{{"preselected", sel.size()}, {"out", f.out}}.dump() << "\n";
  } else {
    out << "pre-selected " << sel.size() << " of " << c.records.size() << " candidates (K = " << cfg.knn_k << ")\n";
  }
  return kExitOk;
}

// --- features --------------------------------------------------------------

struct FeaturesFlags {
  std::string out_dir;
  SyntheticConfig syn;
  ConfigFlags cfg;
  bool unprojected = false;
};

int cmd_features(const FeaturesFlags& f, bool as_json, std::ostream& out) {
  fs::create_directories(f.out_dir);
  const PipelineConfig cfg = f.cfg.config();
  const SyntheticCorpus corpus = make_corpus(f.syn);
  FeatureSpec spec = feature_spec(cfg);
  spec.project = !f.unprojected;
  const PipelineData data = build_pipeline_data(corpus, spec);
  const fs::path dir(f.out_dir);
  json files = json::object();
  files["domain_embeddings"] = write_embeddings((dir / "domain_emb.bin").string(), data.domain_embeddings.header,
                                                data.domain_embeddings.records);
  files["candidate_embeddings"] = write_embeddings((dir / "cand_emb.bin").string(),
                                                   data.candidate_embeddings.header, data.candidate_embeddings.records);
  files["domain_gradients"] =
      write_features((dir / "domain_grad.bin").string(), data.domain_gradients.header, data.domain_gradients.records);
  files["candidate_gradients"] = write_features((dir / "cand_grad.bin").string(), data.candidate_gradients.header,
                                                data.candidate_gradients.records);
  json truth = json::object();
  for (const auto& s : corpus.candidates) truth[s.id.str()] = s.generator;
  write_text((dir / "truth.json").string(), json{{"domain_generator", 0}, {"candidates", truth}}.dump(2) + "\n");
  if (as_json) {
    out << json{{"out_dir", f.out_dir}, {"sha256", files}}.dump() << "\n";
  } else {
    out << "wrote " << corpus.domain.size() << " domain and " << corpus.candidates.size() << " candidate samples to "
        << f.out_dir << "\n";
  }
  return kExitOk;
}

// --- score / select ----------------------------------------------------------

struct ScoreFlags {
  std::string domain_grad, cand_grad, relevance, kernel_out, out;
};

int cmd_score(const ScoreFlags& f, bool as_json, std::ostream& out) {
  const FeatureSet d = read_feature_set(f.domain_grad);
  FeatureSet c = read_feature_set(f.cand_grad);
  if (!f.relevance.empty()) {
    const auto rel = read_json(f.relevance);
    std::unordered_map<SampleId, bool, SampleIdHash> keep;
    for (const auto& id : rel.at("preselected")) keep[SampleId::parse(id.get<std::string>())] = false;
    std::vector<FeatureRecord> kept;
    for (auto& r : c.records) {
      auto it = keep.find(r.id);
      if (it != keep.end()) {
        it->second = true;
        kept.push_back(std::move(r));
      }
    }
    for (const auto& [id, seen] : keep) {
      if (!seen) throw Error(ErrorCode::missing_feature, f.cand_grad + " has no gradient for " + id.str());
    }
    c.records = std::move(kept);
  }
  const KernelMatrix km = assemble_kernel_matrix(d, c);
  if (!f.kernel_out.empty()) write_kernel_matrix(f.kernel_out, km);
  const UtilityScores us = utility_scores(km);
  json rows = json::array();
  for (std::size_t j = 0; j < us.scores.size(); ++j) rows.push_back({{"id", us.cand_ids[j].str()}, {"score", us.scores[j]}});
  const json doc{{"domain_count", km.row_ids.size()}, {"proj_seed", km.proj_seed}, {"scores", rows}};
  if (!f.out.empty()) write_text(f.out, doc.dump(2) + "\n");
  if (as_json) {
    out << json{{"candidates", us.scores.size()}, {"out", f.out}, {"kernel", f.kernel_out}}.dump() << "\n";
  } else {
    out << "scored " << us.scores.size() << " candidates against " << km.row_ids.size() << " domain samples\n";
  }
  return kExitOk;
}

struct SelectFlags {
  std::string scores, out;
  std::uint64_t n = 0;
};

int cmd_select(const SelectFlags& f, bool as_json, std::ostream& out) {
  const auto doc = read_json(f.scores);
  UtilityScores us;
  try {
    for (const auto& row : doc.at("scores")) {
      us.cand_ids.push_back(SampleId::parse(row.at("id").get<std::string>()));
      us.scores.push_back(row.at("score").get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "'" + f.scores + "' is not a scores file: " + e.what());
  }
  const SelectionResult r = select_top_n(us, f.n);
  if (!f.out.empty()) write_selection_result(f.out, r);
  if (as_json) {
    json ids = json::array();
    for (const auto& id : r.selected) ids.push_back(id.str());
    out << json{{"selected", ids}}.dump() << "\n";
  } else {
    for (std::size_t i = 0; i < r.selected.size(); ++i) out << i + 1 << "\t" << r.selected[i].str() << "\t" << r.scores[i] << "\n";
  }
  return kExitOk;
}

// --- pipeline ------------------------------------------------------------------

struct PipelineFlags {
  PipelineInputs inputs;
  ConfigFlags cfg;
  std::string out, manifest;
  bool cosine = false;
};

int cmd_pipeline(const PipelineFlags& f, bool as_json, std::ostream& out) {
  PipelineRun run = run_pipeline(f.cfg.config(), f.inputs, PipelineOptions{f.cosine});
  std::string manifest = f.manifest;
  if (manifest.empty()) manifest = f.out + ".manifest.json";
  const std::string digest = write_pipeline_outputs(run, f.out, manifest);
  if (as_json) {
    out << json{{"selected", run.result.selected.size()},
                {"result", f.out},
                {"result_sha256", digest},
                {"manifest", manifest},
                {"manifest_sha256", run.result.manifest_ref},
                {"timings", to_json(run.timings)}}
               .dump()
        << "\n";
  } else {
    out << "selected " << run.result.selected.size() << " of " << run.manifest.candidate_count
        << " candidates -> " << f.out << "\n\n"
        << format_timings(run.timings);
  }
  return kExitOk;
}

// --- probe -----------------------------------------------------------------------

struct ProbeFlags {
  ProbeOptions opts;
  std::string layers = "8,128,128,3";
  std::string activation = "tanh";
  std::string form = "block";
  std::string out, plot;
};

int cmd_probe(ProbeFlags f, bool as_json, std::ostream& out, std::ostream& err) {
  f.opts.net.layer_dims = parse_dims(f.layers);
  f.opts.net.activation = parse_activation(f.activation);
  if (f.form == "block") {
    f.opts.form = KernelForm::block;
  } else if (f.form == "contracted") {
    f.opts.form = KernelForm::contracted;
  } else {
    throw Error(ErrorCode::config, "kernel form must be 'block' or 'contracted'");
  }
  const ProbeReport r = run_probe(f.opts);
  const json doc = to_json(r);
  if (!f.out.empty()) write_text(f.out, doc.dump(2) + "\n");
  if (!f.plot.empty()) write_text(f.plot, plot_data(r.trace));
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";
  if (as_json) {
    out << doc.dump() << "\n";
  } else {
    out << "checkpoints: " << r.trace.steps.size() << "\n";
    for (const auto& c : r.identities) {
      out << (c.passed ? "ok   " : "FAIL ") << c.name << "  max rel error " << c.max_rel_error << "\n";
    }
    if (r.bound) {
      out << "eps_observed " << r.bound->eps_observed << ", max ||E|| " << r.bound->max_e_norm << " <= bound "
          << r.bound->bound_value << (r.bound->satisfied ? "  ok" : "  FAIL") << "\n";
    }
    if (r.residual && !r.residual->points.empty()) {
      double worst = 0.0;
      for (const auto& p : r.residual->points) worst = std::max(worst, p.bound > 0 ? p.delta_fd / p.bound : 0.0);
      out << "max ||Delta(u)|| / bound " << worst << (r.residual->all_within_bound ? "  ok" : "  FAIL") << "\n";
    }
  }
  for (const auto& msg : r.failures) err << msg << "\n";
  return r.passed() ? kExitOk : kExitAssertion;
}

// --- krr ---------------------------------------------------------------------------

struct KrrFlags {
  bool synthetic = false;
  BlobOptions blobs;
  std::string train_kernel, train_labels, val_kernel, val_labels, out;
  std::vector<double> grid{kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end()};
};

std::vector<int> labels_for(const std::vector<SampleId>& ids, const std::string& path) {
  const auto doc = read_json(path);
  std::vector<int> out;
  for (const auto& id : ids) {
    const auto key = id.str();
    if (!doc.contains(key)) throw Error(ErrorCode::missing_feature, "'" + path + "' has no label for " + key);
    out.push_back(doc.at(key).get<int>());
  }
  return out;
}

int cmd_krr(const KrrFlags& f, bool as_json, std::ostream& out) {
  json doc;
  if (f.synthetic) {
    const BlobReport r = run_blob_krr(f.blobs);
    doc = {{"rbf", to_json(r.rbf)}, {"entk", to_json(r.entk)}, {"max_residual", r.max_residual}};
    if (!as_json) {
      out << "rbf  best lambda " << r.rbf.best_lambda << "  val accuracy " << r.rbf.best_accuracy << "\n"
          << "entk best lambda " << r.entk.best_lambda << "  val accuracy " << r.entk.best_accuracy << "\n"
          << "max residual " << r.max_residual << "\n";
    }
  } else {
    if (f.train_kernel.empty() || f.train_labels.empty() || f.val_kernel.empty() || f.val_labels.empty()) {
      throw Error(ErrorCode::config, "--train-kernel, --train-labels, --val-kernel and --val-labels are required");
    }
    const KernelMatrix kt = read_kernel_matrix(f.train_kernel);
    const KernelMatrix kv = read_kernel_matrix(f.val_kernel);
    if (kt.row_ids != kt.col_ids) throw Error(ErrorCode::dim_mismatch, "training kernel rows and columns differ");
    if (kv.col_ids != kt.col_ids) throw Error(ErrorCode::dim_mismatch, "validation kernel columns differ from training ids");
    const auto yt = labels_for(kt.row_ids, f.train_labels);
    const auto yv = labels_for(kv.row_ids, f.val_labels);
    const SweepResult r = lambda_sweep(kt.values, yt, kv.values, yv, f.grid);
    doc = to_json(r);
    if (!as_json) {
      for (const auto& p : r.points) {
        out << "lambda " << p.lambda << "  train " << p.train_accuracy << "  val " << p.val_accuracy << "\n";
      }
      out << "best lambda " << r.best_lambda << "  val accuracy " << r.best_accuracy << "\n";
    }
  }
  if (!f.out.empty()) write_text(f.out, doc.dump(2) + "\n");
  if (as_json) out << doc.dump() << "\n";
  return kExitOk;
}

// --- demo -----------------------------------------------------------------------------

struct DemoFlags {
  DemoOptions opts;
  std::string out;
};

int cmd_demo(const DemoFlags& f, bool as_json, std::ostream& out, std::ostream& err) {
  const DemoReport r = run_demo(f.opts);
  const json doc = to_json(r);
  if (!f.out.empty()) write_text(f.out, doc.dump(2) + "\n");
  if (as_json) {
    out << doc.dump() << "\n";
  } else {
    out << "pool: " << r.pool_matched << " of " << r.pool_size << " candidates domain-matched (rate " << r.base_rate
        << ")\n"
        << "selected: " << r.selected_matched << " of " << r.selected << " domain-matched (rate " << r.selected_rate
        << ")\n";
    if (r.assertion_skipped) {
      out << "every candidate selected; assertion skipped\n";
    } else {
      out << "one-sided binomial p-value " << r.p_value << (r.passed ? "  ok" : "  FAIL") << "\n";
    }
  }
  err << format_timings(r.timings);
  if (!r.passed) {
    err << "DemoAssertionFailed: selected rate " << r.selected_rate << " is not above the pool rate " << r.base_rate
        << " at the requested confidence\n";
    return kExitAssertion;
  }
  return kExitOk;
}

}  // namespace

DemoReport run_demo(const DemoOptions& opts) {
  const auto& syn = opts.synthetic;
  PipelineConfig cfg = PipelineConfig::for_selection(opts.n_select);
  if (opts.preselect_size) cfg.preselect_size = *opts.preselect_size;
  if (opts.knn_k) cfg.knn_k = *opts.knn_k;
  // Small pools cannot support the default M = 4N; shrink M (and K with
  // it) to the pool size.
  cfg.preselect_size = std::min<std::uint64_t>(cfg.preselect_size, syn.n_candidates);
  cfg.knn_k = std::min<std::uint64_t>(cfg.knn_k, cfg.preselect_size);
  cfg.proj_dim = opts.proj_dim;
  cfg.proj_seed = opts.proj_seed;
  validate_config(cfg);
  if (cfg.n_select > syn.n_candidates) {
    throw Error(ErrorCode::n_too_large, "N = " + std::to_string(cfg.n_select) + " exceeds the pool of " +
                                            std::to_string(syn.n_candidates));
  }

  DemoReport r;
  r.seed = syn.seed;
  r.config = cfg;
  const SyntheticCorpus corpus = make_corpus(syn);
  StageTimings timings;
  const PipelineData data = build_pipeline_data(corpus, feature_spec(cfg), &timings);
  PipelineRun run = run_pipeline(cfg, data);
  for (const char* s : {"warm-up", "embedding", "gradient"}) run.timings.at(s) = timings.at(s);
  r.timings = run.timings;

  std::unordered_map<SampleId, int, SampleIdHash> generator;
  for (const auto& s : corpus.candidates) {
    generator[s.id] = s.generator;
    r.pool_matched += s.generator == 0;
  }
  r.pool_size = corpus.candidates.size();
  r.base_rate = static_cast<double>(r.pool_matched) / static_cast<double>(r.pool_size);
  r.selection = run.result.selected;
  r.selected = r.selection.size();
  for (const auto& id : r.selection) r.selected_matched += generator.at(id) == 0;
  r.selected_rate = r.selected == 0 ? 0.0 : static_cast<double>(r.selected_matched) / static_cast<double>(r.selected);
  r.assertion_skipped = r.selected == r.pool_size;
  r.p_value = binomial_upper_tail(r.selected, r.selected_matched, r.base_rate);
  r.passed = r.assertion_skipped || (r.selected_rate > r.base_rate && r.p_value < 1.0 - opts.confidence);
  return r;
}

nlohmann::ordered_json to_json(const DemoReport& r) {
  json ids = json::array();
  for (const auto& id : r.selection) ids.push_back(id.str());
  return {{"seed", r.seed},
          {"config", to_json(r.config)},
          {"pool_size", r.pool_size},
          {"pool_matched", r.pool_matched},
          {"base_rate", r.base_rate},
          {"selected", r.selected},
          {"selected_matched", r.selected_matched},
          {"selected_rate", r.selected_rate},
          {"p_value", r.p_value},
          {"assertion_skipped", r.assertion_skipped},
          {"passed", r.passed},
          {"selection", ids}};
}

ProbeReport run_probe(const ProbeOptions& o) {
  std::mt19937_64 rng(o.seed);
  const ToyNetwork net = ToyNetwork::random(o.net, rng());
  const ToyNetwork teacher = ToyNetwork::random(o.net, rng());
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset task;
  std::vector<Eigen::VectorXd> probe;
  const auto d = static_cast<Eigen::Index>(o.net.layer_dims.front());
  for (std::size_t i = 0; i < o.n_probe; ++i) {
    Eigen::VectorXd x(d);
    for (Eigen::Index k = 0; k < d; ++k) x[k] = gauss(rng);
    Eigen::VectorXd y = forward(teacher, {x.data(), static_cast<std::size_t>(d)});
    probe.push_back(x);
    task.push_back({std::move(x), std::move(y)});
  }

  ProbeReport r;
  r.trace = record_trace(net, probe, task, o.steps, o.lr, o.checkpoint_every, TraceOptions{o.form});
  r.identities = check_identities(r.trace, o.tolerance);
  for (const auto& c : r.identities) {
    if (!c.passed) {
      std::ostringstream os;
      os << "IdentityCheckFailed: " << c.name << " (max rel error " << c.max_rel_error << " > " << c.tolerance << ")";
      r.failures.push_back(os.str());
    }
  }
  if (r.trace.snapshots.size() < 2) {
    r.warnings.push_back("SparseCheckpoints: checkpoint_every = " + std::to_string(o.checkpoint_every) +
                         " exceeds steps = " + std::to_string(o.steps) + "; only t = 0 was recorded");
    return r;
  }
  std::vector<Eigen::VectorXd> gammas;
  if (o.form == KernelForm::block) gammas = loss_gradients(r.trace, task);
  try {
    r.bound = check_theorem_bound(r.trace, gammas);
    if (!r.bound->e_bound_holds) {
      r.failures.push_back("IdentityCheckFailed: ||E(t)|| <= ||Theta_0|| sqrt(2 eps) / (1 - eps)");
    }
    if (!r.bound->chain_holds) r.failures.push_back("IdentityCheckFailed: ||E gamma|| <= ||E|| ||gamma||");
    if (o.form == KernelForm::block) {
      r.residual = reparam_residual(r.trace, gammas);
      if (r.residual->sparse_checkpoints) {
        r.warnings.push_back(r.residual->warning);
      } else if (!r.residual->all_within_bound) {
        r.failures.push_back("IdentityCheckFailed: ||Delta(u)|| <= eta ||Theta_0|| sqrt(2 eps) / (1 - eps) ||gamma||");
      }
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::negative_cosine) throw;
    r.warnings.push_back(e.what());
  }
  return r;
}

nlohmann::ordered_json to_json(const ProbeReport& r) {
  json ids = json::array();
  for (const auto& c : r.identities) {
    ids.push_back({{"identity", c.name},
                   {"max_rel_error", c.max_rel_error},
                   {"tolerance", c.tolerance},
                   {"passed", c.passed}});
  }
  json doc{{"trace", to_json(r.trace)}, {"identities", ids}};
  doc["bound"] = r.bound ? to_json(*r.bound) : json(nullptr);
  doc["residual"] = r.residual ? to_json(*r.residual) : json(nullptr);
  doc["warnings"] = r.warnings;
  doc["failures"] = r.failures;
  doc["passed"] = r.passed();
  return doc;
}

BlobReport run_blob_krr(const BlobOptions& o) {
  if (o.dim < 3) throw Error(ErrorCode::config, "blob dimension must be at least 3");
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(o.dim);
  auto sample = [&](std::size_t per_class, std::vector<Eigen::VectorXd>& xs, std::vector<int>& ys) {
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        Eigen::VectorXd x(d);
        for (Eigen::Index k = 0; k < d; ++k) x[k] = gauss(rng);
        x[c] += o.separation;
        xs.push_back(std::move(x));
        ys.push_back(c);
      }
    }
  };
  std::vector<Eigen::VectorXd> xt, xv;
  std::vector<int> yt, yv;
  sample(o.per_class_train, xt, yt);
  sample(o.per_class_val, xv, yv);

  auto rbf = [&](const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
    Eigen::MatrixXd k(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < b.size(); ++j) {
        k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            std::exp(-(a[i] - b[j]).squaredNorm() / (2.0 * o.bandwidth * o.bandwidth));
      }
    }
    return k;
  };
  BlobReport r;
  r.rbf = lambda_sweep(rbf(xt, xt), yt, rbf(xv, xt), yv);

  ToyConfig tc;
  tc.layer_dims.front() = o.dim;
  const ToyNetwork net = ToyNetwork::random(tc, rng());
  auto ntk = [&](const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
    std::vector<Eigen::MatrixXd> ja, jb;
    for (const auto& x : a) ja.push_back(jacobian(net, {x.data(), static_cast<std::size_t>(x.size())}));
    for (const auto& x : b) jb.push_back(jacobian(net, {x.data(), static_cast<std::size_t>(x.size())}));
    Eigen::MatrixXd k(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < b.size(); ++j) {
        k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = ja[i].cwiseProduct(jb[j]).sum();
      }
    }
    return k;
  };
  Eigen::MatrixXd kt = ntk(xt, xt);
  kt = (0.5 * (kt + kt.transpose())).eval();
  r.entk = lambda_sweep(kt, yt, ntk(xv, xt), yv);
  for (const auto* s : {&r.rbf, &r.entk}) {
    for (const auto& p : s->points) r.max_residual = std::max(r.max_residual, p.residual);
  }
  return r;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"NTK-based data selection engine"};
  app.require_subcommand(1);
  bool as_json = false;
  unsigned threads = 0;
  app.add_flag("--json", as_json, "machine-readable output");
  app.add_option("--threads", threads, "worker cap (default NTKSEL_THREADS or all cores)");

  PreselectFlags pre;
  auto* c_pre = app.add_subcommand("preselect", "KNN relevance counting and Top-M");
  c_pre->add_option("--domain-emb", pre.domain_emb, "domain embedding file")->required();
  c_pre->add_option("--cand-emb", pre.cand_emb, "candidate embedding file")->required();
  c_pre->add_option("--out", pre.out, "relevance JSON output");
  pre.cfg.attach(c_pre, 9000);

  FeaturesFlags feat;
  auto* c_feat = app.add_subcommand("features", "write toy embedding and gradient files");
  c_feat->add_option("--out-dir", feat.out_dir, "output directory")->required();
  c_feat->add_option("--n-domain", feat.syn.n_domain)->capture_default_str();
  c_feat->add_option("--n-candidates", feat.syn.n_candidates)->capture_default_str();
  c_feat->add_option("--matched-fraction", feat.syn.matched_fraction)->capture_default_str();
  c_feat->add_option("--data-seed", feat.syn.seed, "seed for the synthetic corpus")->capture_default_str();
  c_feat->add_flag("--unprojected", feat.unprojected, "store raw adapter gradients");
  feat.cfg.attach(c_feat, 50);

  ScoreFlags score;
  auto* c_score = app.add_subcommand("score", "kernel matrix and utility scores");
  c_score->add_option("--domain-grad", score.domain_grad)->required();
  c_score->add_option("--cand-grad", score.cand_grad)->required();
  c_score->add_option("--relevance", score.relevance, "restrict to the pre-selected ids in this file");
  c_score->add_option("--kernel-out", score.kernel_out, "kernel container output");
  c_score->add_option("--out", score.out, "scores JSON output");

  SelectFlags sel;
  auto* c_sel = app.add_subcommand("select", "Top-N from a scores file");
  c_sel->add_option("--scores", sel.scores)->required();
  c_sel->add_option("--n", sel.n)->required();
  c_sel->add_option("--out", sel.out, "selection result output");

  PipelineFlags pipe;
  auto* c_pipe = app.add_subcommand("pipeline", "pre-selection, kernel scoring and Top-N from files");
  c_pipe->add_option("--domain-emb", pipe.inputs.domain_embeddings)->required();
  c_pipe->add_option("--cand-emb", pipe.inputs.candidate_embeddings)->required();
  c_pipe->add_option("--domain-grad", pipe.inputs.domain_gradients)->required();
  c_pipe->add_option("--cand-grad", pipe.inputs.candidate_gradients)->required();
  c_pipe->add_option("--out", pipe.out, "selection result (JSON lines)")->required();
  c_pipe->add_option("--manifest", pipe.manifest, "manifest path (default <out>.manifest.json)");
  c_pipe->add_flag("--cosine", pipe.cosine, "add a cosine diagnostic column");
  pipe.cfg.attach(c_pipe, 9000);

  ProbeFlags probe;
  auto* c_probe = app.add_subcommand("probe", "kernel stability trace on a toy fine-tune");
  c_probe->add_option("--steps", probe.opts.steps)->capture_default_str();
  c_probe->add_option("--lr", probe.opts.lr)->capture_default_str();
  c_probe->add_option("--checkpoint-every", probe.opts.checkpoint_every)->capture_default_str();
  c_probe->add_option("--n-probe", probe.opts.n_probe)->capture_default_str();
  c_probe->add_option("--seed", probe.opts.seed)->capture_default_str();
  c_probe->add_option("--layers", probe.layers, "comma-separated layer sizes")->capture_default_str();
  c_probe->add_option("--rank", probe.opts.net.rank)->capture_default_str();
  c_probe->add_option("--activation", probe.activation)->capture_default_str();
  c_probe->add_option("--form", probe.form, "block or contracted")->capture_default_str();
  c_probe->add_option("--tolerance", probe.opts.tolerance)->capture_default_str();
  c_probe->add_option("--out", probe.out, "trace JSON output");
  c_probe->add_option("--plot", probe.plot, "cosine-vs-step data file");

  KrrFlags krr;
  auto* c_krr = app.add_subcommand("krr", "kernel ridge regression with a lambda sweep");
  c_krr->add_flag("--synthetic", krr.synthetic, "three-class Gaussian blobs");
  c_krr->add_option("--seed", krr.blobs.seed)->capture_default_str();
  c_krr->add_option("--train-kernel", krr.train_kernel);
  c_krr->add_option("--train-labels", krr.train_labels, "JSON {id: label}");
  c_krr->add_option("--val-kernel", krr.val_kernel);
  c_krr->add_option("--val-labels", krr.val_labels);
  c_krr->add_option("--grid", krr.grid, "lambda values");
  c_krr->add_option("--out", krr.out, "JSON report");

  DemoFlags demo;
  auto* c_demo = app.add_subcommand("demo", "synthetic end-to-end run with a selection-rate check");
  c_demo->add_option("--seed", demo.opts.synthetic.seed)->capture_default_str();
  c_demo->add_option("--n", demo.opts.n_select)->capture_default_str();
  c_demo->add_option("--n-domain", demo.opts.synthetic.n_domain)->capture_default_str();
  c_demo->add_option("--n-candidates", demo.opts.synthetic.n_candidates)->capture_default_str();
  c_demo->add_option("--matched-fraction", demo.opts.synthetic.matched_fraction)->capture_default_str();
  c_demo->add_option("--proj-dim", demo.opts.proj_dim)->capture_default_str();
  c_demo->add_option("--proj-seed", demo.opts.proj_seed)->capture_default_str();
  c_demo->add_option("--m", demo.opts.preselect_size);
  c_demo->add_option("--k", demo.opts.knn_k);
  c_demo->add_option("--out", demo.out, "JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    set_max_threads(threads);
    if (*c_pre) return cmd_preselect(pre, as_json, out);
    if (*c_feat) return cmd_features(feat, as_json, out);
    if (*c_score) return cmd_score(score, as_json, out);
    if (*c_sel) return cmd_select(sel, as_json, out);
    if (*c_pipe) return cmd_pipeline(pipe, as_json, out);
    if (*c_probe) return cmd_probe(probe, as_json, out, err);
    if (*c_krr) return cmd_krr(krr, as_json, out);
    if (*c_demo) return cmd_demo(demo, as_json, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"ntksel"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ntksel::cli
