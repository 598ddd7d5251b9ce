#include "ntksel/dynamics_probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

namespace ntksel {
namespace {

Eigen::MatrixXd kernel_at(const ToyNetwork& net, std::span<const Eigen::VectorXd> probe, KernelForm form) {
  return form == KernelForm::block ? exact_ntk_block(net, probe) : exact_ntk_gram(net, probe);
}

Eigen::VectorXd stacked_outputs(const ToyNetwork& net, std::span<const Eigen::VectorXd> inputs) {
  const auto d = static_cast<Eigen::Index>(net.output_dim());
  Eigen::VectorXd out(static_cast<Eigen::Index>(inputs.size()) * d);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& x = inputs[i];
    out.segment(static_cast<Eigen::Index>(i) * d, d) = forward(net, {x.data(), static_cast<std::size_t>(x.size())});
  }
  return out;
}

Eigen::VectorXd stacked_gamma(const Eigen::VectorXd& outputs, const Dataset& task) {
  const auto n = static_cast<Eigen::Index>(task.size());
  const Eigen::Index d = n == 0 ? 0 : outputs.size() / n;
  Eigen::VectorXd g(outputs.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& y = task[static_cast<std::size_t>(i)].y;
    if (y.size() != d) throw Error(ErrorCode::dim_mismatch, "target " + std::to_string(i) + " has the wrong length");
    g.segment(i * d, d) = (outputs.segment(i * d, d) - y) / static_cast<double>(n);
  }
  return g;
}

// |a - b| / max(|a|, |b|, floor); 0 when everything is zero.
double rel_error(double a, double b, double floor = 0.0) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

double min_cosine(const KernelTrace& trace) {
  return *std::min_element(trace.cosines.begin(), trace.cosines.end());
}

double bound_factor(double eps) { return std::sqrt(2.0 * eps) / (1.0 - eps); }

// Fills cosines, a*, ||R||, ||E||, norms and u from the snapshots.
void derive_quantities(KernelTrace& tr) {
  if (tr.snapshots.empty()) throw Error(ErrorCode::config, "trace has no snapshots");
  const Eigen::MatrixXd& k0 = tr.snapshots.front().matrix;
  tr.theta0_norm = k0.norm();
  if (tr.theta0_norm == 0.0) throw Error(ErrorCode::zero_norm, "initial kernel is zero");
  const double k0_sq = tr.theta0_norm * tr.theta0_norm;
  for (std::size_t j = 0; j < tr.snapshots.size(); ++j) {
    const Eigen::MatrixXd& k = tr.snapshots[j].matrix;
    tr.theta_norm.push_back(k.norm());
    if (k == k0) {
      // Bitwise equal to Theta_0 (t = 0, or frozen training).
      tr.cosines.push_back(1.0);
      tr.astar.push_back(1.0);
      tr.resid_norm.push_back(0.0);
      tr.e_norm.push_back(0.0);
    } else {
      const double a = k.cwiseProduct(k0).sum() / k0_sq;
      const double r = (k - a * k0).norm();
      tr.cosines.push_back(frobenius_cos(k, k0));
      tr.astar.push_back(a);
      tr.resid_norm.push_back(r);
      tr.e_norm.push_back(a != 0.0 ? r / std::abs(a) : std::numeric_limits<double>::infinity());
    }
    if (j == 0) {
      tr.u_axis.push_back(0.0);
    } else {
      const double dt = static_cast<double>(tr.steps[j] - tr.steps[j - 1]);
      tr.u_axis.push_back(tr.u_axis.back() + 0.5 * dt * (tr.astar[j] + tr.astar[j - 1]));
    }
  }
}

}  // namespace

KernelTrace record_trace(const ToyNetwork& net, std::span<const Eigen::VectorXd> probe, const Dataset& task,
                         std::size_t steps, double lr, std::size_t checkpoint_every, const TraceOptions& opts) {
  if (probe.size() < 2) throw Error(ErrorCode::config, "need at least two probe inputs");
  if (task.empty()) throw Error(ErrorCode::config, "training task is empty");
  if (checkpoint_every < 1) throw Error(ErrorCode::config, "checkpoint_every must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::config, "learning rate must be finite and >= 0");

  KernelTrace tr;
  tr.form = opts.form;
  tr.eta = lr;
  std::vector<Eigen::VectorXd> task_inputs;
  for (const auto& ex : task) task_inputs.push_back(ex.x);

  ToyNetwork cur = net;
  for (std::size_t t = 0;; ++t) {
    if (t % checkpoint_every == 0) {
      Eigen::MatrixXd k = kernel_at(cur, probe, opts.form);
      tr.steps.push_back(t);
      tr.outputs.push_back(stacked_outputs(cur, probe));
      tr.gamma_norm.push_back(stacked_gamma(stacked_outputs(cur, task_inputs), task).norm());
      tr.loss.push_back(mse_loss(cur, task));
      tr.snapshots.push_back({t, std::move(k)});
    }
    if (t == steps) break;
    adapter_gd_step(cur, task, lr);
    if (!std::isfinite(mse_loss(cur, task))) {
      throw Error(ErrorCode::divergence, "loss became non-finite at step " + std::to_string(t + 1));
    }
  }

  derive_quantities(tr);
  return tr;
}

KernelTrace trace_from_snapshots(std::vector<KernelSnapshot> snapshots, double eta, KernelForm form) {
  KernelTrace tr;
  tr.form = form;
  tr.eta = eta;
  for (std::size_t j = 0; j < snapshots.size(); ++j) {
    if (j > 0 && snapshots[j].step <= snapshots[j - 1].step) {
      throw Error(ErrorCode::config, "snapshot steps must increase");
    }
    tr.steps.push_back(snapshots[j].step);
  }
  tr.snapshots = std::move(snapshots);
  derive_quantities(tr);
  return tr;
}

std::vector<Eigen::VectorXd> loss_gradients(const KernelTrace& trace, const Dataset& task) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& f : trace.outputs) {
    if (task.empty() || f.size() % static_cast<Eigen::Index>(task.size()) != 0) {
      throw Error(ErrorCode::dim_mismatch, "probe outputs do not line up with the task");
    }
    out.push_back(stacked_gamma(f, task));
  }
  return out;
}

std::vector<IdentityCheck> check_identities(const KernelTrace& tr, double tol) {
  IdentityCheck pyth{"||R||^2 = ||Theta||^2 (1 - S^2)", 0.0, tol, true};
  IdentityCheck pyth_sum{"||R||^2 + ||a* Theta_0||^2 = ||Theta||^2", 0.0, tol, true};
  IdentityCheck enorm{"||E|| = ||Theta_0|| sqrt(1 - S^2) / S", 0.0, tol, true};
  IdentityCheck astar{"a* = (||Theta|| / ||Theta_0||) S", 0.0, tol, true};
  IdentityCheck start{"S(0) = 1, a*(0) = 1, R(0) = 0", 0.0, 0.0, true};
  const double n0 = tr.theta0_norm;
  for (std::size_t j = 0; j < tr.snapshots.size(); ++j) {
    const double s = tr.cosines[j], a = tr.astar[j], th = tr.theta_norm[j], r = tr.resid_norm[j];
    const double one_minus_s2 = std::max(0.0, 1.0 - s * s);
    // Floors keep near-collinear checkpoints from being judged on the
    // rounding noise of 1 - S^2 (about 1e-16 absolute).
    pyth.max_rel_error = std::max(pyth.max_rel_error, rel_error(r * r, th * th * one_minus_s2, 1e-6 * th * th));
    pyth_sum.max_rel_error =
        std::max(pyth_sum.max_rel_error, rel_error(r * r + a * a * n0 * n0, th * th));
    if (s > 0.0) {
      enorm.max_rel_error =
          std::max(enorm.max_rel_error, rel_error(tr.e_norm[j], n0 * std::sqrt(one_minus_s2) / s, 1e-3 * n0));
    }
    astar.max_rel_error = std::max(astar.max_rel_error, rel_error(a, th / n0 * s));
  }
  if (!tr.snapshots.empty()) {
    start.max_rel_error = std::abs(tr.cosines[0] - 1.0) + std::abs(tr.astar[0] - 1.0) + tr.resid_norm[0];
  }
  std::vector<IdentityCheck> all{pyth, pyth_sum, enorm, astar, start};
  for (auto& c : all) c.passed = c.max_rel_error <= c.tolerance;
  return all;
}

BoundReport check_theorem_bound(const KernelTrace& tr, std::span<const Eigen::VectorXd> gammas) {
  if (tr.snapshots.size() < 2) {
    throw Error(ErrorCode::sparse_checkpoints, "bound check needs at least two checkpoints, trace has " +
                                                   std::to_string(tr.snapshots.size()));
  }
  const double smin = min_cosine(tr);
  if (smin <= 0.0) {
    throw Error(ErrorCode::negative_cosine, "min S(t) = " + std::to_string(smin) + "; the bound does not apply");
  }
  BoundReport rep;
  rep.eps_observed = 1.0 - smin;
  rep.bound_value = tr.theta0_norm * bound_factor(rep.eps_observed);
  const double slack = 1e-9 * rep.bound_value + 1e-12 * tr.theta0_norm;
  for (double e : tr.e_norm) {
    rep.max_e_norm = std::max(rep.max_e_norm, e);
    if (e > rep.bound_value + slack) rep.e_bound_holds = false;
  }
  if (!gammas.empty()) {
    if (gammas.size() != tr.snapshots.size()) {
      throw Error(ErrorCode::dim_mismatch, "one gamma per checkpoint required");
    }
    const Eigen::MatrixXd& k0 = tr.snapshots.front().matrix;
    for (std::size_t j = 0; j < gammas.size(); ++j) {
      const Eigen::MatrixXd& k = tr.snapshots[j].matrix;
      if (gammas[j].size() != k.rows()) throw Error(ErrorCode::dim_mismatch, "gamma length differs from kernel size");
      const double a = tr.astar[j];
      const Eigen::MatrixXd e = (k - a * k0) / a;
      const double lhs = (e * gammas[j]).norm();
      const double rhs = e.norm() * gammas[j].norm();
      if (rhs > 0.0) rep.max_chain_ratio = std::max(rep.max_chain_ratio, lhs / rhs);
      if (lhs > rhs * (1.0 + 1e-12)) rep.chain_holds = false;
    }
  }
  rep.satisfied = rep.e_bound_holds && rep.chain_holds;
  return rep;
}

ResidualReport reparam_residual(const KernelTrace& tr, std::span<const Eigen::VectorXd> gammas) {
  if (tr.form != KernelForm::block) {
    throw Error(ErrorCode::config, "residual needs the block kernel form (outputs stacked per sample)");
  }
  if (gammas.size() != tr.snapshots.size()) throw Error(ErrorCode::dim_mismatch, "one gamma per checkpoint required");
  ResidualReport rep;
  if (tr.snapshots.size() < 2) {
    rep.sparse_checkpoints = true;
    rep.warning = "SparseCheckpoints: fewer than two checkpoints, no finite differences possible";
    return rep;
  }
  for (std::size_t j = 1; j < tr.steps.size(); ++j) {
    if (tr.steps[j] - tr.steps[j - 1] > 1) {
      rep.sparse_checkpoints = true;
      rep.warning = "SparseCheckpoints: checkpoints are " + std::to_string(tr.steps[j] - tr.steps[j - 1]) +
                    " steps apart; finite differences span several updates";
      break;
    }
  }
  const double smin = min_cosine(tr);
  if (smin <= 0.0) {
    throw Error(ErrorCode::negative_cosine, "min S(t) = " + std::to_string(smin) + "; the bound does not apply");
  }
  const double factor = tr.theta0_norm * bound_factor(1.0 - smin);
  const Eigen::MatrixXd& k0 = tr.snapshots.front().matrix;
  for (std::size_t j = 0; j + 1 < tr.snapshots.size(); ++j) {
    const auto& g = gammas[j];
    if (g.size() != k0.rows() || tr.outputs[j].size() != k0.rows()) {
      throw Error(ErrorCode::dim_mismatch, "gamma and outputs must match the block kernel size");
    }
    const double a = tr.astar[j];
    const double dt = static_cast<double>(tr.steps[j + 1] - tr.steps[j]);
    const Eigen::VectorXd fd = (tr.outputs[j + 1] - tr.outputs[j]) / (dt * a) + tr.eta * (k0 * g);
    const Eigen::MatrixXd e = (tr.snapshots[j].matrix - a * k0) / a;
    ResidualPoint p;
    p.step = tr.steps[j];
    p.u = tr.u_axis[j];
    p.delta_fd = fd.norm();
    p.delta_algebraic = (tr.eta * (e * g)).norm();
    p.bound = tr.eta * factor * g.norm();
    p.within_bound = p.delta_fd <= p.bound;
    rep.all_within_bound = rep.all_within_bound && p.within_bound;
    rep.points.push_back(p);
  }
  return rep;
}

nlohmann::ordered_json to_json(const KernelTrace& tr) {
  return {{"form", tr.form == KernelForm::block ? "block" : "contracted"},
          {"eta", tr.eta},
          {"theta0_norm", tr.theta0_norm},
          {"steps", tr.steps},
          {"cosines", tr.cosines},
          {"astar", tr.astar},
          {"resid_norm", tr.resid_norm},
          {"e_norm", tr.e_norm},
          {"u_axis", tr.u_axis},
          {"theta_norm", tr.theta_norm},
          {"gamma_norm", tr.gamma_norm},
          {"loss", tr.loss}};
}

nlohmann::ordered_json to_json(const BoundReport& r) {
  return {{"eps_observed", r.eps_observed}, {"max_e_norm", r.max_e_norm},       {"bound_value", r.bound_value},
          {"max_chain_ratio", r.max_chain_ratio}, {"e_bound_holds", r.e_bound_holds}, {"chain_holds", r.chain_holds},
          {"satisfied", r.satisfied}};
}

nlohmann::ordered_json to_json(const ResidualReport& r) {
  nlohmann::ordered_json pts = nlohmann::ordered_json::array();
  for (const auto& p : r.points) {
    pts.push_back({{"step", p.step},
                   {"u", p.u},
                   {"delta_fd", p.delta_fd},
                   {"delta_algebraic", p.delta_algebraic},
                   {"bound", p.bound},
                   {"within_bound", p.within_bound}});
  }
  return {{"all_within_bound", r.all_within_bound},
          {"sparse_checkpoints", r.sparse_checkpoints},
          {"warning", r.warning},
          {"points", pts}};
}

std::string plot_data(const KernelTrace& tr) {
  std::ostringstream os;
  os.precision(17);
  os << "# step u cosine astar e_norm resid_norm\n";
  for (std::size_t j = 0; j < tr.steps.size(); ++j) {
    os << tr.steps[j] << ' ' << tr.u_axis[j] << ' ' << tr.cosines[j] << ' ' << tr.astar[j] << ' ' << tr.e_norm[j]
       << ' ' << tr.resid_norm[j] << '\n';
  }
  return os.str();
}

}  // namespace ntksel
