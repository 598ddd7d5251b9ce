#include "ntksel/select.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "ntksel/digest.hpp"

namespace ntksel {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
auto stage(const char* name, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

std::vector<double> norms_of(const std::vector<FeatureRecord>& recs) {
  std::vector<double> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(std::sqrt(jf_ntk(std::span<const float>(r.vector), r.vector)));
  return out;
}

// Selection shared by the file and in-memory paths once the pre-selected
// candidate gradients are in hand.
void score_and_select(const PipelineConfig& cfg, const FeatureSet& domain_grad, const FeatureSet& pre_grad,
                      const PipelineOptions& opts, PipelineRun& run) {
  const auto t0 = Clock::now();
  stage("ntk_selection", [&] {
    const KernelMatrix km = assemble_kernel_matrix(domain_grad, pre_grad);
    const UtilityScores us = utility_scores(km);
    run.result = select_top_n(us, cfg.n_select);
    if (opts.cosine_column) {
      // Rows and columns of km follow SampleId order; match them back.
      std::vector<FeatureRecord> rows(domain_grad.records), cols(pre_grad.records);
      auto by_id = [](const FeatureRecord& a, const FeatureRecord& b) { return a.id < b.id; };
      std::sort(rows.begin(), rows.end(), by_id);
      std::sort(cols.begin(), cols.end(), by_id);
      const auto rn = norms_of(rows), cn = norms_of(cols);
      std::unordered_map<SampleId, std::size_t, SampleIdHash> col_of;
      for (std::size_t j = 0; j < km.col_ids.size(); ++j) col_of[km.col_ids[j]] = j;
      std::vector<double> cosine;
      for (const auto& id : run.result.selected) {
        const std::size_t j = col_of.at(id);
        double acc = 0.0;
        for (std::size_t i = 0; i < rn.size(); ++i) {
          const double denom = rn[i] * cn[j];
          acc += denom > 0.0 ? km.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) / denom : 0.0;
        }
        cosine.push_back(acc / static_cast<double>(rn.size()));
      }
      run.result.cosine = std::move(cosine);
    }
    return 0;
  });
  auto& ts = run.timings.at("ntk_selection");
  ts.seconds += seconds_since(t0);
  ts.work = std::to_string(domain_grad.records.size()) + " x " + std::to_string(pre_grad.records.size()) +
            " kernel, p = " + std::to_string(domain_grad.header.dim);
}

void knn_stage(const PipelineConfig& cfg, const EmbeddingSet& domain, const EmbeddingSet& cand, PipelineRun& run) {
  const auto t0 = Clock::now();
  stage("knn", [&] {
    run.relevance = accelerated_knn_relevance(domain.records, cand.records, cfg.knn_k);
    run.preselected = top_m(run.relevance, cfg.preselect_size);
    return 0;
  });
  auto& ts = run.timings.at("knn");
  ts.seconds = seconds_since(t0);
  ts.work = std::to_string(domain.records.size()) + " queries over " + std::to_string(cand.records.size()) +
            " candidates, K = " + std::to_string(cfg.knn_k) + ", M = " + std::to_string(cfg.preselect_size);
}

void check_embeddings(const EmbeddingSet& s, const std::string& what) {
  if (s.header.kind != FeatureKind::embedding) {
    throw Error(ErrorCode::bad_kind, what + " is a " + std::string(to_string(s.header.kind)) + " file");
  }
}

}  // namespace

UtilityScores utility_scores(const KernelMatrix& km) {
  if (km.values.rows() == 0 || km.values.cols() == 0) throw Error(ErrorCode::empty_matrix, "kernel matrix is empty");
  UtilityScores us;
  us.cand_ids = km.col_ids;
  const double n = static_cast<double>(km.values.rows());
  us.scores.assign(static_cast<std::size_t>(km.values.cols()), 0.0);
  for (Eigen::Index j = 0; j < km.values.cols(); ++j) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < km.values.rows(); ++i) acc += km.values(i, j);
    const double s = acc / n;
    if (!std::isfinite(s)) throw Error(ErrorCode::non_finite_value, "score for " + km.col_ids[j].str());
    us.scores[static_cast<std::size_t>(j)] = s;
  }
  return us;
}

SelectionResult select_top_n(const UtilityScores& scores, std::uint64_t n) {
  if (n > scores.scores.size()) {
    throw Error(ErrorCode::n_too_large,
                "N = " + std::to_string(n) + " exceeds " + std::to_string(scores.scores.size()) + " scored candidates");
  }
  std::vector<std::size_t> order(scores.scores.size());
  for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
                      return scores.cand_ids[a] < scores.cand_ids[b];
                    });
  SelectionResult r;
  for (std::size_t j = 0; j < n; ++j) {
    r.selected.push_back(scores.cand_ids[order[j]]);
    r.scores.push_back(scores.scores[order[j]]);
  }
  return r;
}

StageTiming& StageTimings::at(std::string_view name) {
  for (auto& s : stages) {
    if (s.stage == name) return s;
  }
  throw Error(ErrorCode::config, "unknown stage '" + std::string(name) + "'");
}

double StageTimings::total() const {
  double t = 0.0;
  for (const auto& s : stages) t += s.seconds;
  return t;
}

nlohmann::ordered_json to_json(const StageTimings& t) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& s : t.stages) {
    arr.push_back({{"stage", s.stage}, {"seconds", s.seconds}, {"external", s.external}, {"work", s.work}});
  }
  return arr;
}

std::string format_timings(const StageTimings& t) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "stage" << ' ' << std::right << std::setw(10) << "seconds" << "  work\n";
  os << std::fixed << std::setprecision(3);
  for (const auto& s : t.stages) {
    std::string work = s.external ? "(external; I/O only)" : "";
    if (!s.work.empty()) work += (work.empty() ? "" : " ") + s.work;
    os << std::left << std::setw(14) << s.stage << ' ' << std::right << std::setw(10) << s.seconds;
    if (!work.empty()) os << "  " << work;
    os << '\n';
  }
  os << std::left << std::setw(14) << "total" << ' ' << std::right << std::setw(10) << t.total() << '\n';
  return os.str();
}

void check_gradient_header(const PipelineConfig& cfg, const FeatureFileHeader& h, const std::string& what) {
  if (h.kind != FeatureKind::gradient) {
    throw Error(ErrorCode::bad_kind, what + " is a " + std::string(to_string(h.kind)) + " file");
  }
  if (h.has_flag(header_flags::projected)) {
    if (h.proj_seed != cfg.proj_seed) {
      throw Error(ErrorCode::seed_mismatch, what + " was projected with seed " + std::to_string(h.proj_seed) +
                                                ", config says " + std::to_string(cfg.proj_seed));
    }
    if (h.dim != cfg.proj_dim) {
      throw Error(ErrorCode::dim_mismatch,
                  what + " has dim " + std::to_string(h.dim) + ", config says " + std::to_string(cfg.proj_dim));
    }
  }
  if (h.has_flag(header_flags::seq_len_normalized) != cfg.normalize_by_seq_len) {
    throw Error(ErrorCode::normalization_mismatch, what + (cfg.normalize_by_seq_len
                                                               ? " is not seq-len normalised"
                                                               : " is already seq-len normalised"));
  }
  if (!h.has_flag(header_flags::grad_scaled) || h.grad_scale != cfg.grad_scale) {
    throw Error(ErrorCode::normalization_mismatch,
                what + " carries grad_scale " + std::to_string(h.grad_scale) + ", config says " +
                    std::to_string(cfg.grad_scale));
  }
}

PipelineRun run_pipeline(const PipelineConfig& cfg_in, const PipelineInputs& in, const PipelineOptions& opts) {
  const PipelineConfig cfg = stage("config", [&] { return validate_config(cfg_in); });
  PipelineRun run;

  auto t0 = Clock::now();
  EmbeddingSet de, ce;
  stage("embedding", [&] {
    de = read_embedding_set(in.domain_embeddings);
    ce = read_embedding_set(in.candidate_embeddings);
    check_embeddings(de, in.domain_embeddings);
    check_embeddings(ce, in.candidate_embeddings);
    return 0;
  });
  run.timings.at("embedding").seconds = seconds_since(t0);
  run.timings.at("embedding").work = "read " + std::to_string(de.records.size() + ce.records.size()) + " embeddings";

  knn_stage(cfg, de, ce, run);

  t0 = Clock::now();
  FeatureSet dg, pg;
  stage("gradient", [&] {
    dg = read_feature_set(in.domain_gradients);
    check_gradient_header(cfg, dg.header, in.domain_gradients);
    FeatureReader reader(in.candidate_gradients);
    check_gradient_header(cfg, reader.header(), in.candidate_gradients);
    pg.header = reader.header();
    std::unordered_set<SampleId, SampleIdHash> wanted(run.preselected.begin(), run.preselected.end());
    FeatureRecord rec;
    while (reader.next(rec)) {
      if (wanted.erase(rec.id) == 1) pg.records.push_back(rec);
    }
    if (!wanted.empty()) {
      std::vector<SampleId> missing(wanted.begin(), wanted.end());
      std::sort(missing.begin(), missing.end());
      throw Error(ErrorCode::missing_feature, in.candidate_gradients + " has no gradient for " + missing.front().str() +
                                                  " (" + std::to_string(missing.size()) + " missing)");
    }
    return 0;
  });
  run.timings.at("gradient").seconds = seconds_since(t0);
  run.timings.at("gradient").work = "read " + std::to_string(dg.records.size() + pg.records.size()) + " gradients";

  score_and_select(cfg, dg, pg, opts, run);

  run.manifest.config = cfg;
  run.manifest.domain_count = de.records.size();
  run.manifest.candidate_count = ce.records.size();
  const std::vector<std::string> files{in.domain_embeddings, in.candidate_embeddings, in.domain_gradients,
                                       in.candidate_gradients};
  for (const auto& f : files) run.manifest.feature_file_digests.push_back({f, sha256_file(f)});
  run.manifest.created_at = reproducible_timestamp(files);
  return run;
}

PipelineRun run_pipeline(const PipelineConfig& cfg_in, const PipelineData& data, const PipelineOptions& opts) {
  const PipelineConfig cfg = stage("config", [&] { return validate_config(cfg_in); });
  PipelineRun run;
  stage("embedding", [&] {
    check_embeddings(data.domain_embeddings, "domain embeddings");
    check_embeddings(data.candidate_embeddings, "candidate embeddings");
    return 0;
  });
  knn_stage(cfg, data.domain_embeddings, data.candidate_embeddings, run);

  FeatureSet pg;
  stage("gradient", [&] {
    check_gradient_header(cfg, data.domain_gradients.header, "domain gradients");
    check_gradient_header(cfg, data.candidate_gradients.header, "candidate gradients");
    pg.header = data.candidate_gradients.header;
    std::unordered_set<SampleId, SampleIdHash> wanted(run.preselected.begin(), run.preselected.end());
    for (const auto& r : data.candidate_gradients.records) {
      if (wanted.erase(r.id) == 1) pg.records.push_back(r);
    }
    if (!wanted.empty()) {
      std::vector<SampleId> missing(wanted.begin(), wanted.end());
      std::sort(missing.begin(), missing.end());
      throw Error(ErrorCode::missing_feature, "no candidate gradient for " + missing.front().str());
    }
    return 0;
  });

  score_and_select(cfg, data.domain_gradients, pg, opts, run);
  run.manifest.config = cfg;
  run.manifest.domain_count = data.domain_embeddings.records.size();
  run.manifest.candidate_count = data.candidate_embeddings.records.size();
  run.manifest.created_at = reproducible_timestamp({});
  return run;
}

std::string write_pipeline_outputs(PipelineRun& run, const std::string& result_path, const std::string& manifest_path) {
  run.result.manifest_ref = write_manifest(manifest_path, run.manifest);
  return write_selection_result(result_path, run.result);
}

std::string write_selection_result(const std::string& path, const SelectionResult& r) {
  std::string text;
  nlohmann::ordered_json head{{"format", "ntksel-selection"},
                              {"version", 1},
                              {"manifest_sha256", r.manifest_ref},
                              {"count", r.selected.size()},
                              {"cosine_column", r.cosine.has_value()}};
  text += head.dump() + "\n";
  for (std::size_t i = 0; i < r.selected.size(); ++i) {
    nlohmann::ordered_json line{{"rank", i + 1}, {"id", r.selected[i].str()}, {"score", r.scores[i]}};
    if (r.cosine) line["cosine"] = (*r.cosine)[i];
    text += line.dump() + "\n";
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

SelectionResult read_selection_result(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  SelectionResult r;
  std::string line;
  try {
    if (!std::getline(in, line)) throw Error(ErrorCode::truncated_file, "'" + path + "' is empty");
    const auto head = nlohmann::json::parse(line);
    if (head.value("format", "") != "ntksel-selection") {
      throw Error(ErrorCode::bad_magic, "'" + path + "' is not a selection result");
    }
    r.manifest_ref = head.at("manifest_sha256").get<std::string>();
    const bool has_cos = head.value("cosine_column", false);
    if (has_cos) r.cosine.emplace();
    const auto count = head.at("count").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      r.selected.push_back(SampleId::parse(j.at("id").get<std::string>()));
      r.scores.push_back(j.at("score").get<double>());
      if (has_cos) r.cosine->push_back(j.at("cosine").get<double>());
    }
    if (r.selected.size() != count) {
      throw Error(ErrorCode::truncated_file, "'" + path + "' lists " + std::to_string(r.selected.size()) +
                                                 " of " + std::to_string(count) + " rows");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "malformed selection result '" + path + "': " + e.what());
  }
  return r;
}

}  // namespace ntksel
