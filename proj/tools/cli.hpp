#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntksel/dynamics_probe.hpp"
#include "ntksel/krr.hpp"
#include "ntksel/select.hpp"
#include "ntksel/synthetic.hpp"

namespace ntksel::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitAssertion = 1;
inline constexpr int kExitInput = 2;

/// Parses argv and dispatches to a subcommand. Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct DemoOptions {
  SyntheticConfig synthetic;
  std::uint64_t n_select = 50;
  std::optional<std::uint64_t> preselect_size;
  std::optional<std::uint64_t> knn_k;
  std::uint32_t proj_dim = 8192;
  std::uint64_t proj_seed = 0;
  double confidence = 0.99;
};

struct DemoReport {
  std::uint64_t seed = 0;
  PipelineConfig config;
  std::size_t pool_size = 0;
  std::size_t pool_matched = 0;
  double base_rate = 0.0;
  std::size_t selected = 0;
  std::size_t selected_matched = 0;
  double selected_rate = 0.0;
  double p_value = 1.0;
  bool assertion_skipped = false;
  bool passed = false;
  std::vector<SampleId> selection;
  StageTimings timings;
};

/// Synthesises a domain task and a mixed candidate pool, runs the whole
/// pipeline in process and tests whether domain-matched candidates are
/// over-represented (one-sided binomial test against the pool rate).
DemoReport run_demo(const DemoOptions& opts);
nlohmann::ordered_json to_json(const DemoReport& r);

struct ProbeOptions {
  ToyConfig net;
  std::uint64_t seed = 0;
  std::size_t n_probe = 16;
  std::size_t steps = 200;
  double lr = 0.05;
  std::size_t checkpoint_every = 1;
  KernelForm form = KernelForm::block;
  double tolerance = 1e-8;
};

struct ProbeReport {
  KernelTrace trace;
  std::vector<IdentityCheck> identities;
  std::optional<BoundReport> bound;
  std::optional<ResidualReport> residual;
  std::vector<std::string> warnings;
  std::vector<std::string> failures;
  bool passed() const { return failures.empty(); }
};

/// Random toy network, random regression targets from a teacher network;
/// probe inputs are the training inputs.
ProbeReport run_probe(const ProbeOptions& opts);
nlohmann::ordered_json to_json(const ProbeReport& r);

struct BlobOptions {
  std::uint64_t seed = 0;
  std::size_t per_class_train = 40;
  std::size_t per_class_val = 40;
  std::size_t dim = 8;
  double separation = 3.0;
  double bandwidth = 2.0;
};

struct BlobReport {
  SweepResult rbf;
  SweepResult entk;
  double max_residual = 0.0;
};

/// Three Gaussian blobs; sweeps the default grid with an RBF kernel and
/// with the exact NTK of a random toy network.
BlobReport run_blob_krr(const BlobOptions& opts);

}  // namespace ntksel::cli
