#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ntksel/kernel.hpp"
#include "ntksel/toy_model.hpp"

namespace ntksel {

/// contracted: n x n, entry sum_k <grad f_k(x_i), grad f_k(x_j)>.
/// block: (n*D) x (n*D) over stacked outputs; the form in which the
/// output dynamics read df/dt = -eta * Theta * gamma.
enum class KernelForm { contracted, block };

struct TraceOptions {
  KernelForm form = KernelForm::contracted;
};

/// Per checkpoint t (in optimiser steps): the kernel Theta(t), its cosine
/// S(t) with Theta_0, the collinear coefficient a*(t), the residual norm
/// ||R(t)|| = ||Theta(t) - a* Theta_0||, ||E(t)|| = ||R(t)|| / a*, and the
/// reparameterised time u(t) = trapezoid integral of a*.
struct KernelTrace {
  KernelForm form = KernelForm::contracted;
  std::vector<std::size_t> steps;
  std::vector<KernelSnapshot> snapshots;
  std::vector<double> cosines;
  std::vector<double> astar;
  std::vector<double> resid_norm;
  std::vector<double> e_norm;
  std::vector<double> u_axis;
  std::vector<double> theta_norm;
  std::vector<double> loss;
  double eta = 0.0;
  double theta0_norm = 0.0;
  std::vector<double> gamma_norm;
  /// Stacked outputs on the probe inputs (index i*D + k) per checkpoint.
  std::vector<Eigen::VectorXd> outputs;
};

/// Trains the adapters on `task` with `steps` full-batch gradient steps and
/// records a snapshot every `checkpoint_every` steps (t = 0 included).
/// gamma(t) = dL/df stacked over `task` with L = (1/2n) sum ||f - y||^2.
KernelTrace record_trace(const ToyNetwork& net, std::span<const Eigen::VectorXd> probe_inputs, const Dataset& task,
                         std::size_t steps, double lr, std::size_t checkpoint_every, const TraceOptions& opts = {});

/// Derived quantities for externally supplied kernels (steps strictly
/// increasing, first snapshot is Theta_0). Outputs, loss and gamma stay empty.
KernelTrace trace_from_snapshots(std::vector<KernelSnapshot> snapshots, double eta,
                                 KernelForm form = KernelForm::contracted);

/// gamma_j = (f_j - y) / n stacked, using the trace's recorded outputs.
/// Requires the probe inputs to be the task inputs in the same order.
std::vector<Eigen::VectorXd> loss_gradients(const KernelTrace& trace, const Dataset& task);

struct IdentityCheck {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

/// Pythagorean identity, closed-form ||E||, a* = (||Theta||/||Theta_0||) S,
/// and the t = 0 values, evaluated at every checkpoint.
std::vector<IdentityCheck> check_identities(const KernelTrace& trace, double tolerance = 1e-8);

struct BoundReport {
  double eps_observed = 0.0;
  double max_e_norm = 0.0;
  double bound_value = 0.0;  // ||Theta_0|| sqrt(2 eps) / (1 - eps)
  /// max_t ||E(t) gamma(t)|| / (||E(t)|| ||gamma(t)||); at most 1.
  double max_chain_ratio = 0.0;
  bool e_bound_holds = true;
  bool chain_holds = true;
  bool satisfied = true;
};

/// Throws NegativeCosine when some S(t) <= 0 and SparseCheckpoints with
/// fewer than two checkpoints. `gammas` may be empty (chain check skipped).
BoundReport check_theorem_bound(const KernelTrace& trace, std::span<const Eigen::VectorXd> gammas = {});

struct ResidualPoint {
  std::size_t step = 0;
  double u = 0.0;
  double delta_fd = 0.0;         // || (f_{j+1} - f_j) / (dt a*_j) + eta Theta_0 gamma_j ||
  double delta_algebraic = 0.0;  // || -eta E_j gamma_j ||
  double bound = 0.0;            // eta ||Theta_0|| sqrt(2 eps) / (1 - eps) ||gamma_j||
  bool within_bound = true;
};

struct ResidualReport {
  std::vector<ResidualPoint> points;
  bool all_within_bound = true;
  /// Set when checkpoints are more than one step apart (or too few):
  /// finite differences then mix several steps and the residual is only
  /// indicative.
  bool sparse_checkpoints = false;
  std::string warning;
};

/// Needs a block-form trace whose probe inputs are the training inputs.
ResidualReport reparam_residual(const KernelTrace& trace, std::span<const Eigen::VectorXd> gammas);

nlohmann::ordered_json to_json(const KernelTrace& trace);
nlohmann::ordered_json to_json(const BoundReport& report);
nlohmann::ordered_json to_json(const ResidualReport& report);

/// Whitespace-separated columns: step u cosine astar e_norm resid_norm.
std::string plot_data(const KernelTrace& trace);

}  // namespace ntksel
