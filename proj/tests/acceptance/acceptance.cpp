// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails. Pass criterion names as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <unistd.h>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cli.hpp"
#include "ntksel/kernel.hpp"
#include "ntksel/krr.hpp"
#include "ntksel/preselect.hpp"
#include "ntksel/projection.hpp"
#include "ntksel/select.hpp"
#include "ntksel/synthetic.hpp"

using namespace ntksel;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ntksel_acceptance_" + std::to_string(::getpid())) / name;
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Eigen::VectorXd gaussian(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::VectorXd v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> random_pairs(std::size_t n, std::size_t dim,
                                                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    auto x = gaussian(static_cast<Eigen::Index>(dim), rng);
    auto y = gaussian(static_cast<Eigen::Index>(dim), rng);
    pairs.emplace_back(std::move(x), std::move(y));
  }
  return pairs;
}

// 1. Jacobian-free fidelity on the default toy network.
Outcome jf_fidelity() {
  const auto t0 = Clock::now();
  const ToyNetwork net = ToyNetwork::random(ToyConfig{}, 0);
  const auto pairs = random_pairs(200, net.input_dim(), 1);
  const auto s = cross_term_diagnostic(net, pairs);
  const double secs = seconds_since(t0);
  return {s.pearson_r >= 0.95 && secs < 60.0,
          "pearson r = " + fmt("%.4f", s.pearson_r) + " over 200 pairs (need >= 0.95), " + fmt("%.2f", secs) +
              " s (need < 60)"};
}

// 2. Cross terms: small relative to the exact kernel, none without extra outputs.
Outcome cross_terms() {
  const ToyNetwork net = ToyNetwork::random(ToyConfig{}, 0);
  const auto pairs = random_pairs(200, net.input_dim(), 2);
  const auto s = cross_term_diagnostic(net, pairs);

  ToyConfig single = ToyConfig{};
  single.layer_dims.back() = 1;
  const auto s1 = cross_term_diagnostic(ToyNetwork::random(single, 0), pairs);
  const bool pass = s.median_ratio < 1.0 && s.pearson_r >= 0.95 && s1.max_ratio == 0.0 && s1.median_ratio == 0.0;
  return {pass, "D=3 median ratio " + fmt("%.4f", s.median_ratio) + " (max " + fmt("%.3f", s.max_ratio) +
                    "), r = " + fmt("%.4f", s.pearson_r) + "; D=1 max ratio " + fmt("%g", s1.max_ratio)};
}

// 3. Decomposition identities and the perturbation bound on several traces.
Outcome drift_identities() {
  const auto t0 = Clock::now();
  struct Variant {
    const char* name;
    cli::ProbeOptions opts;
  };
  std::vector<Variant> variants;
  variants.push_back({"default", {}});
  {
    cli::ProbeOptions o;
    o.lr = 0.2;
    o.steps = 100;
    o.seed = 1;
    variants.push_back({"lr=0.2", o});
  }
  {
    cli::ProbeOptions o;
    o.lr = 0.01;
    o.steps = 400;
    o.seed = 2;
    variants.push_back({"lr=0.01", o});
  }
  {
    cli::ProbeOptions o;
    o.net.activation = Activation::relu;
    o.seed = 3;
    variants.push_back({"relu", o});
  }
  {
    cli::ProbeOptions o;
    o.net.layer_dims = {8, 64, 64, 64, 3};
    o.net.rank = 4;
    o.seed = 4;
    o.steps = 150;
    variants.push_back({"deep", o});
  }
  std::string detail;
  bool pass = true;
  double worst_identity = 0.0, worst_ratio = 0.0;
  for (const auto& v : variants) {
    const auto rep = cli::run_probe(v.opts);
    for (const auto& c : rep.identities) {
      worst_identity = std::max(worst_identity, c.max_rel_error);
      if (!c.passed || c.tolerance > 1e-8) {
        pass = false;
        detail += std::string(" [") + v.name + ": " + c.name + " " + fmt("%.3g", c.max_rel_error) + "]";
      }
    }
    if (!rep.bound || !rep.bound->satisfied) {
      pass = false;
      detail += std::string(" [") + v.name + ": bound not satisfied]";
    }
    if (!rep.residual || rep.residual->sparse_checkpoints || !rep.residual->all_within_bound) {
      pass = false;
      detail += std::string(" [") + v.name + ": Delta exceeds bound]";
    } else {
      for (const auto& p : rep.residual->points) {
        if (p.bound > 0.0) worst_ratio = std::max(worst_ratio, p.delta_fd / p.bound);
      }
    }
    if (!rep.passed()) pass = false;
  }
  const double secs = seconds_since(t0);
  pass = pass && secs < 300.0;
  return {pass, std::to_string(variants.size()) + " traces, checkpoint_every=1; max identity error " +
                    fmt("%.2e", worst_identity) + " (tol 1e-8); max ||Delta||/bound " + fmt("%.3f", worst_ratio) +
                    "; " + fmt("%.1f", secs) + " s (need < 300)" + detail};
}

// 4. Johnson-Lindenstrauss inner-product preservation.
Outcome jl_projection() {
  const std::uint64_t P = 100000;
  const std::uint32_t p = 8192;
  const std::size_t n_pairs = 1000, batch_pairs = 200;
  const ProjectionSpec spec{2024, P, p, ScaleMode::jl_scaled};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> angle(0.0, M_PI);
  std::size_t good = 0;
  double worst = 0.0;
  for (std::size_t start = 0; start < n_pairs; start += batch_pairs) {
    Eigen::MatrixXd g(2 * batch_pairs, P);
    std::vector<double> exact(batch_pairs);
    for (std::size_t i = 0; i < batch_pairs; ++i) {
      // Inner products spread over [-1, 1] rather than all near zero.
      Eigen::VectorXd u = gaussian(P, rng).normalized();
      Eigen::VectorXd w = gaussian(P, rng);
      w = (w - w.dot(u) * u).normalized();
      const double th = angle(rng);
      const Eigen::VectorXd v = (std::cos(th) * u + std::sin(th) * w).normalized();
      exact[i] = u.dot(v);
      g.row(static_cast<Eigen::Index>(2 * i)) = u.transpose();
      g.row(static_cast<Eigen::Index>(2 * i + 1)) = v.transpose();
    }
    const Eigen::MatrixXd proj = project_batch(spec, g);
    for (std::size_t i = 0; i < batch_pairs; ++i) {
      const double est = proj.row(static_cast<Eigen::Index>(2 * i)).dot(proj.row(static_cast<Eigen::Index>(2 * i + 1)));
      const double err = std::abs(est - exact[i]);
      worst = std::max(worst, err);
      if (err <= 0.1) ++good;
    }
  }
  const double frac = static_cast<double>(good) / static_cast<double>(n_pairs);
  return {frac >= 0.99, std::to_string(good) + "/1000 pairs within 0.1 (need >= 99%), max error " +
                            fmt("%.4f", worst)};
}

// Runs the in-memory pipeline on unprojected toy gradients and compares the
// selection with a ranking by `oracle_kernel` means.
bool selection_matches(const ToyNetwork& net, std::size_t n_dom, std::size_t n_cand, std::uint64_t n_select,
                       std::uint64_t seed,
                       const std::function<double(const Eigen::VectorXd&, const Eigen::VectorXd&)>& oracle_kernel) {
  std::mt19937_64 rng(seed);
  std::vector<Eigen::VectorXd> dx, cx;
  for (std::size_t i = 0; i < n_dom; ++i) dx.push_back(gaussian(static_cast<Eigen::Index>(net.input_dim()), rng));
  for (std::size_t j = 0; j < n_cand; ++j) cx.push_back(gaussian(static_cast<Eigen::Index>(net.input_dim()), rng));

  PipelineConfig cfg;
  cfg.n_select = n_select;
  cfg.preselect_size = n_cand;
  cfg.knn_k = std::max<std::uint64_t>(1, n_cand / 4);
  FeatureSpec spec = feature_spec(cfg);
  spec.project = false;

  auto to_sample = [](const Eigen::VectorXd& x, const std::string& tag, std::size_t i) {
    return SyntheticSample{{tag, i}, 0, 1, std::vector<double>(x.data(), x.data() + x.size())};
  };
  std::vector<SyntheticSample> ds, cs;
  for (std::size_t i = 0; i < n_dom; ++i) ds.push_back(to_sample(dx[i], "domain", i));
  for (std::size_t j = 0; j < n_cand; ++j) cs.push_back(to_sample(cx[j], "cand", j));
  PipelineData data{embeddings(net, ds), embeddings(net, cs), gradient_features(net, ds, spec),
                    gradient_features(net, cs, spec)};
  const auto run = run_pipeline(cfg, data);

  std::vector<std::pair<double, SampleId>> ranked;
  for (std::size_t j = 0; j < n_cand; ++j) {
    double s = 0.0;
    for (const auto& x : dx) s += oracle_kernel(x, cx[j]);
    ranked.emplace_back(-s / static_cast<double>(n_dom), SampleId{"cand", j});
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<SampleId> expected;
  for (std::uint64_t r = 0; r < n_select; ++r) expected.push_back(ranked[r].second);
  return run.result.selected == expected;
}

// 5. Selection equals the exhaustive exact-kernel ranking.
Outcome selection_oracle() {
  ToyConfig one = ToyConfig{};
  one.layer_dims.back() = 1;
  std::mt19937_64 rng(11);
  int matched = 0, total = 0, matched_jf = 0;
  for (int t = 0; t < 30; ++t) {
    ToyNetwork net = ToyNetwork::random(one, 100 + static_cast<std::uint64_t>(t));
    // Trained-looking adapters so every gradient block is live.
    Eigen::VectorXd a = net.adapter_params();
    std::normal_distribution<double> nd(0.0, 0.2);
    for (auto& v : a) v = nd(rng);
    net.set_adapter_params(a);
    const std::size_t n_dom = 1 + rng() % 10, n_cand = 5 + rng() % 46;
    const std::uint64_t n_sel = 1 + rng() % n_cand;
    ++total;
    matched += selection_matches(net, n_dom, n_cand, n_sel, rng(), [&](const auto& x, const auto& y) {
      return exact_ntk(net, {x.data(), static_cast<std::size_t>(x.size())}, {y.data(), static_cast<std::size_t>(y.size())});
    });
  }
  // Three outputs: the pipeline ranks by the Jacobian-free kernel.
  const ToyNetwork net3 = ToyNetwork::random(ToyConfig{}, 7);
  for (int t = 0; t < 10; ++t) {
    matched_jf += selection_matches(net3, 10, 50, 10, 500 + static_cast<std::uint64_t>(t), [&](const auto& x, const auto& y) {
      return jf_ntk_unprojected(net3, {x.data(), static_cast<std::size_t>(x.size())},
                                {y.data(), static_cast<std::size_t>(y.size())});
    });
  }
  return {matched == total && matched_jf == 10,
          std::to_string(matched) + "/" + std::to_string(total) +
              " D=1 instances equal the exact-kernel ranking; " + std::to_string(matched_jf) +
              "/10 D=3 instances equal the unprojected Jacobian-free ranking"};
}

std::vector<EmbeddingRecord> random_points(const std::string& tag, std::size_t n, std::size_t dim,
                                           std::mt19937_64& rng, int mode) {
  std::normal_distribution<float> nd;
  std::uniform_int_distribution<int> grid(-2, 2);
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(dim);
    for (auto& x : v) x = mode == 1 ? static_cast<float>(grid(rng)) : nd(rng);
    out.push_back({{tag, i}, std::move(v)});
  }
  if (mode == 2) {
    // Clustered copies: many exact duplicates.
    for (std::size_t i = 1; i < out.size(); i += 3) out[i].vector = out[i - 1].vector;
  }
  return out;
}

// 6. Pre-selection versus a full-sort oracle.
Outcome preselect_oracle() {
  std::mt19937_64 rng(13);
  int ok = 0;
  std::size_t largest = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t total = t < 10 ? 10000 : 20 + rng() % 9981;
    const std::size_t n_dom = std::max<std::size_t>(1, total / (2 + rng() % 20));
    const std::size_t n_cand = std::max<std::size_t>(1, total - n_dom);
    const std::size_t dim = 1 + rng() % 48;
    const int mode = t % 3;
    auto d = random_points("d", n_dom, dim, rng, mode);
    auto c = random_points("c", n_cand, dim, rng, mode);
    std::shuffle(c.begin(), c.end(), rng);
    const std::uint64_t k = 1 + rng() % std::min<std::size_t>(n_cand, 200);
    largest = std::max(largest, n_dom + n_cand);

    std::vector<EmbeddingRecord> sorted_c = c;
    std::sort(sorted_c.begin(), sorted_c.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::vector<std::uint64_t> oracle(n_cand, 0);
    std::vector<std::pair<double, std::size_t>> all(n_cand);
    for (const auto& q : d) {
      for (std::size_t j = 0; j < n_cand; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
          const double diff = static_cast<double>(q.vector[i]) - static_cast<double>(sorted_c[j].vector[i]);
          s += diff * diff;
        }
        all[j] = {s, j};
      }
      std::sort(all.begin(), all.end());
      for (std::uint64_t r = 0; r < k; ++r) ++oracle[all[r].second];
    }
    const auto brute = knn_relevance(d, c, k);
    const auto fast = accelerated_knn_relevance(d, c, k);
    if (brute.counts == oracle && fast.counts == oracle) ++ok;
  }
  return {ok == 100, std::to_string(ok) + "/100 instances exact (up to " + std::to_string(largest) +
                         " points, ties and duplicates included)"};
}

// 7. Kernel ridge regression.
Outcome krr_checks() {
  std::mt19937_64 rng(17);
  double worst_residual = 0.0, worst_vs_inverse = 0.0;
  int systems = 0;
  for (Eigen::Index n : {1, 2, 5, 8, 20, 50, 120, 200}) {
    for (double lambda : {0.0, 1e-5, 1e-3, 1e-1}) {
      const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return std::normal_distribution<double>()(rng); });
      const Eigen::MatrixXd k = a * a.transpose() + Eigen::MatrixXd::Identity(n, n);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = static_cast<int>(rng() % 3);
      const auto m = krr_fit(k, labels, lambda);
      Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(m.classes.size()));
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto c = std::find(m.classes.begin(), m.classes.end(), labels[static_cast<std::size_t>(i)]) -
                       m.classes.begin();
        y(i, c) = 1.0;
      }
      const Eigen::MatrixXd shifted = k + static_cast<double>(n) * lambda * Eigen::MatrixXd::Identity(n, n);
      const Eigen::MatrixXd oracle = shifted.inverse() * y;
      worst_residual = std::max(worst_residual, (shifted * m.alpha - y).norm() / y.norm());
      worst_vs_inverse = std::max(worst_vs_inverse, (m.alpha - oracle).norm() / oracle.norm());
      ++systems;
    }
  }
  const auto blobs = cli::run_blob_krr(cli::BlobOptions{});
  const std::vector<double> grid(kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end());
  const bool grid_ok = grid == std::vector<double>{1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 1e-1};
  const bool pass = worst_residual <= 1e-8 && worst_vs_inverse <= 1e-8 && blobs.rbf.best_accuracy >= 0.9 && grid_ok;
  return {pass, std::to_string(systems) + " SPD systems: max residual " + fmt("%.2e", worst_residual) +
                    ", max deviation from inverse " + fmt("%.2e", worst_vs_inverse) + "; blobs accuracy " +
                    fmt("%.3f", blobs.rbf.best_accuracy) + " (eNTK " + fmt("%.3f", blobs.entk.best_accuracy) +
                    "); default grid " + (grid_ok ? "matches" : "differs")};
}

int cli_quiet(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

// 8. Byte-identical pipeline outputs.
Outcome determinism() {
  const fs::path dir = scratch_dir("determinism");
  const std::string f = (dir / "features").string();
  if (cli_quiet({"features", "--out-dir", f, "--n", "50", "--n-domain", "50", "--n-candidates", "2000",
                 "--proj-dim", "1024", "--seed", "9"}) != 0) {
    return {false, "feature generation failed"};
  }
  auto args = [&](const std::string& out, const std::string& threads) {
    return std::vector<std::string>{"--threads", threads, "pipeline", "--domain-emb", f + "/domain_emb.bin",
                                    "--cand-emb", f + "/cand_emb.bin", "--domain-grad", f + "/domain_grad.bin",
                                    "--cand-grad", f + "/cand_grad.bin", "--out", out, "--n", "50",
                                    "--proj-dim", "1024", "--seed", "9", "--cosine"};
  };
  const fs::path a = dir / "a.jsonl", b = dir / "b.jsonl";
  if (cli_quiet(args(a.string(), "1")) != 0 || cli_quiet(args(b.string(), "4")) != 0) {
    return {false, "pipeline command failed"};
  }
  const bool same_result = slurp(a) == slurp(b);
  const bool same_manifest = slurp(a.string() + ".manifest.json") == slurp(b.string() + ".manifest.json");
  fs::remove_all(dir);
  return {same_result && same_manifest, std::string("selection result ") + (same_result ? "identical" : "differs") +
                                            ", manifest " + (same_manifest ? "identical" : "differs") +
                                            " (runs with 1 and 4 threads)"};
}

// 9. The demo finds the domain signal.
Outcome demo_signal() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cli::DemoOptions o;
    o.synthetic.seed = seed;
    const auto r = cli::run_demo(o);
    const bool ok = r.passed && !r.assertion_skipped && r.selected_rate > r.base_rate && r.p_value < 0.01;
    pass = pass && ok;
    detail += (seed ? "; " : "") + std::string("seed ") + std::to_string(seed) + ": " +
              std::to_string(r.selected_matched) + "/" + std::to_string(r.selected) + " matched vs base " +
              fmt("%.2f", r.base_rate) + ", p = " + fmt("%.1e", r.p_value);
  }
  return {pass, detail};
}

// 10. Throughput at 10^4 candidates, 10^3 domain samples, p = 8192.
Outcome throughput() {
  const auto t0 = Clock::now();
  const fs::path dir = scratch_dir("throughput");
  SyntheticConfig sc;
  sc.seed = 21;
  sc.n_domain = 1000;
  sc.n_candidates = 10000;
  const PipelineConfig cfg = PipelineConfig::for_selection(1000);
  StageTimings build;
  const auto corpus = make_corpus(sc);
  const PipelineData data = build_pipeline_data(corpus, feature_spec(cfg), &build);
  PipelineInputs in{(dir / "domain_emb.bin").string(), (dir / "cand_emb.bin").string(),
                    (dir / "domain_grad.bin").string(), (dir / "cand_grad.bin").string()};
  write_embeddings(in.domain_embeddings, data.domain_embeddings.header, data.domain_embeddings.records);
  write_embeddings(in.candidate_embeddings, data.candidate_embeddings.header, data.candidate_embeddings.records);
  write_features(in.domain_gradients, data.domain_gradients.header, data.domain_gradients.records);
  write_features(in.candidate_gradients, data.candidate_gradients.header, data.candidate_gradients.records);

  auto run = run_pipeline(cfg, in);
  write_pipeline_outputs(run, (dir / "selection.jsonl").string(), (dir / "manifest.json").string());
  const double secs = seconds_since(t0);

  // Feature generation happened in process; fold it into the table.
  StageTimings table = run.timings;
  for (const char* s : {"warm-up", "embedding", "gradient"}) {
    auto& t = table.at(s);
    const auto& b = build.at(s);
    t.seconds += b.seconds;
    t.external = false;
    t.work = b.work + (t.work.empty() ? "" : "; " + t.work);
  }
  std::cout << format_timings(table);
  fs::remove_all(dir);
  return {run.result.selected.size() == 1000 && secs < 600.0,
          "|C| = 10000, |D| = 1000, p = 8192, N = 1000, M = 4000: " + fmt("%.1f", secs) + " s end to end (need < 600)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"jf_fidelity", jf_fidelity},
      {"cross_terms", cross_terms},
      {"drift_identities", drift_identities},
      {"jl_projection", jl_projection},
      {"selection_oracle", selection_oracle},
      {"preselect_oracle", preselect_oracle},
      {"krr", krr_checks},
      {"determinism", determinism},
      {"demo_signal", demo_signal},
      {"throughput", throughput},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0, ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << "  " << o.detail << "  [" << fmt("%.1f", seconds_since(t0))
              << " s]" << std::endl;
    failures += o.pass ? 0 : 1;
  }
  std::error_code ec;
  fs::remove_all(fs::temp_directory_path() / ("ntksel_acceptance_" + std::to_string(::getpid())), ec);
  std::cout << (failures == 0 ? "ALL PASS" : "FAILURES: " + std::to_string(failures)) << " (" << ran
            << " criteria)" << std::endl;
  return failures == 0 && ran > 0 ? 0 : 1;
}
