#include "ntksel/krr.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "ntksel/parallel.hpp"

namespace ntksel {

KrrModel krr_fit(const Eigen::MatrixXd& k, std::span<const int> labels, double lambda,
                 std::vector<SampleId> train_ids) {
  const Eigen::Index n = k.rows();
  if (n == 0 || k.cols() != n) throw Error(ErrorCode::dim_mismatch, "kernel must be square and non-empty");
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw Error(ErrorCode::dim_mismatch,
                std::to_string(labels.size()) + " labels for a " + std::to_string(n) + " x " + std::to_string(n) + " kernel");
  }
  if (!train_ids.empty() && train_ids.size() != labels.size()) {
    throw Error(ErrorCode::dim_mismatch, "train_ids do not match the kernel size");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(ErrorCode::config, "lambda must be finite and >= 0");
  if (!k.allFinite()) throw Error(ErrorCode::non_finite_value, "kernel has non-finite entries");
  const double kmax = k.cwiseAbs().maxCoeff();
  const double asym = (k - k.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9 * kmax) {
    throw Error(ErrorCode::asymmetric_kernel, "max |K - K^T| = " + std::to_string(asym));
  }

  KrrModel m;
  m.lambda = lambda;
  m.train_ids = std::move(train_ids);
  m.classes.assign(labels.begin(), labels.end());
  std::sort(m.classes.begin(), m.classes.end());
  m.classes.erase(std::unique(m.classes.begin(), m.classes.end()), m.classes.end());
  std::map<int, Eigen::Index> column;
  for (std::size_t c = 0; c < m.classes.size(); ++c) column[m.classes[c]] = static_cast<Eigen::Index>(c);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(m.classes.size()));
  for (Eigen::Index i = 0; i < n; ++i) y(i, column[labels[static_cast<std::size_t>(i)]]) = 1.0;

  // Symmetrise exactly; the asymmetry was already bounded above.
  Eigen::MatrixXd a = 0.5 * (k + k.transpose());
  a.diagonal().array() += static_cast<double>(n) * lambda;

  if (lambda == 0.0) {
    // LDLT's rcond estimate misses exact zero pivots, so use the spectrum.
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a, Eigen::EigenvaluesOnly).eigenvalues();
    const double emax = ev.cwiseAbs().maxCoeff();
    const double rcond = emax > 0.0 ? ev.cwiseAbs().minCoeff() / emax : 0.0;
    if (!(rcond > 1e-14)) {
      throw Error(ErrorCode::singular_system, "lambda = 0 and K is rank-deficient (rcond " + std::to_string(rcond) + ")");
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) {
    m.alpha = llt.solve(y);
  } else {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::singular_system, "factorisation failed");
    m.alpha = ldlt.solve(y);
  }
  if (!m.alpha.allFinite()) throw Error(ErrorCode::singular_system, "solve produced non-finite coefficients");
  m.residual = (a * m.alpha - y).norm() / y.norm();
  return m;
}

std::vector<int> krr_predict(const KrrModel& model, const Eigen::MatrixXd& k_test) {
  if (k_test.cols() != model.alpha.rows()) {
    throw Error(ErrorCode::dim_mismatch, "K_test has " + std::to_string(k_test.cols()) + " columns, model has " +
                                             std::to_string(model.alpha.rows()) + " training points");
  }
  const Eigen::MatrixXd scores = k_test * model.alpha;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(i, c) > scores(i, best)) best = c;
    }
    out.push_back(model.classes[static_cast<std::size_t>(best)]);
  }
  return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw Error(ErrorCode::dim_mismatch, "prediction and label counts differ");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

SweepResult lambda_sweep(const Eigen::MatrixXd& k_train, std::span<const int> labels, const Eigen::MatrixXd& k_val,
                         std::span<const int> val_labels, std::span<const double> grid) {
  if (grid.empty()) throw Error(ErrorCode::config, "lambda grid is empty");
  if (static_cast<std::size_t>(k_val.rows()) != val_labels.size()) {
    throw Error(ErrorCode::dim_mismatch, "validation kernel rows differ from validation labels");
  }
  SweepResult r;
  r.points.resize(grid.size());
  parallel_for(grid.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t g = begin; g < end; ++g) {
      const KrrModel m = krr_fit(k_train, labels, grid[g]);
      auto& p = r.points[g];
      p.lambda = grid[g];
      p.train_accuracy = accuracy(krr_predict(m, k_train), labels);
      p.val_accuracy = accuracy(krr_predict(m, k_val), val_labels);
      p.alpha_norm = m.alpha.norm();
      p.residual = m.residual;
    }
  });
  std::size_t best = 0;
  for (std::size_t g = 1; g < r.points.size(); ++g) {
    const auto& p = r.points[g];
    const auto& b = r.points[best];
    if (p.val_accuracy > b.val_accuracy || (p.val_accuracy == b.val_accuracy && p.lambda < b.lambda)) best = g;
  }
  r.best_lambda = r.points[best].lambda;
  r.best_accuracy = r.points[best].val_accuracy;
  return r;
}

nlohmann::ordered_json to_json(const SweepResult& r) {
  nlohmann::ordered_json pts = nlohmann::ordered_json::array();
  for (const auto& p : r.points) {
    pts.push_back({{"lambda", p.lambda},
                   {"train_accuracy", p.train_accuracy},
                   {"val_accuracy", p.val_accuracy},
                   {"alpha_norm", p.alpha_norm},
                   {"residual", p.residual}});
  }
  return {{"best_lambda", r.best_lambda}, {"best_accuracy", r.best_accuracy}, {"grid", pts}};
}

}  // namespace ntksel
