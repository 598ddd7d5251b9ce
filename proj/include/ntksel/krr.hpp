#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "ntksel/domain.hpp"

namespace ntksel {

inline constexpr std::array<double, 7> kDefaultLambdaGrid{1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 1e-1};

/// alpha solves (K + n lambda I) alpha = Y, Y one-hot over `classes`
/// (sorted ascending).
struct KrrModel {
  Eigen::MatrixXd alpha;
  double lambda = 0.0;
  std::vector<SampleId> train_ids;
  std::vector<int> classes;
  double residual = 0.0;  // ||(K + n lambda I) alpha - Y||_F / ||Y||_F
};

/// Cholesky solve, falling back to a pivoted LDL^T when the shifted matrix
/// is not numerically positive definite. Throws AsymmetricKernel when
/// |K - K^T| exceeds 1e-9 max|K|, SingularSystem when lambda = 0 and the
/// eigenvalue ratio min|ev| / max|ev| of K is at most 1e-14.
KrrModel krr_fit(const Eigen::MatrixXd& k, std::span<const int> labels, double lambda,
                 std::vector<SampleId> train_ids = {});

/// Argmax of K_test * alpha per row; ties go to the earlier class.
std::vector<int> krr_predict(const KrrModel& model, const Eigen::MatrixXd& k_test);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

struct SweepPoint {
  double lambda = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double alpha_norm = 0.0;
  double residual = 0.0;
};

struct SweepResult {
  double best_lambda = 0.0;
  double best_accuracy = 0.0;
  std::vector<SweepPoint> points;
};

/// Fits every lambda (in parallel), scores on validation, returns the most
/// accurate; ties go to the smaller lambda.
SweepResult lambda_sweep(const Eigen::MatrixXd& k_train, std::span<const int> labels, const Eigen::MatrixXd& k_val,
                         std::span<const int> val_labels,
                         std::span<const double> grid = kDefaultLambdaGrid);

nlohmann::ordered_json to_json(const SweepResult& r);

}  // namespace ntksel
