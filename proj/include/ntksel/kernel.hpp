#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ntksel/domain.hpp"
#include "ntksel/feature_store.hpp"
#include "ntksel/toy_model.hpp"

namespace ntksel {

/// |D| x M kernel values; rows are domain samples, columns pre-selected
/// candidates, both in ascending SampleId order.
struct KernelMatrix {
  std::vector<SampleId> row_ids;
  std::vector<SampleId> col_ids;
  Eigen::MatrixXd values;
  std::uint64_t proj_seed = 0;
};

struct KernelSnapshot {
  std::size_t step = 0;
  Eigen::MatrixXd matrix;
};

/// <u, v> with 64-bit accumulation in ascending index order.
double jf_ntk(std::span<const float> u, std::span<const float> v);
double jf_ntk(std::span<const double> u, std::span<const double> v);

/// sum_k <grad f_k(x), grad f_k(x')> over adapter parameters.
double exact_ntk(const ToyNetwork& net, std::span<const double> x, std::span<const double> x2);

/// Unprojected Jacobian-free value <grad sum_k f_k(x), grad sum_k f_k(x')>.
double jf_ntk_unprojected(const ToyNetwork& net, std::span<const double> x, std::span<const double> x2);

/// Exact-NTK Gram matrix over `inputs` (n x n, trace over outputs).
Eigen::MatrixXd exact_ntk_gram(const ToyNetwork& net, std::span<const Eigen::VectorXd> inputs);

/// Full output-block NTK over `inputs`: (n*D) x (n*D) with entry
/// ((i,k),(j,m)) = <grad f_k(x_i), grad f_m(x_j)>, index i*D + k.
Eigen::MatrixXd exact_ntk_block(const ToyNetwork& net, std::span<const Eigen::VectorXd> inputs);

struct CrossTermSummary {
  double median_ratio = 0.0;
  double max_ratio = 0.0;
  double pearson_r = 0.0;
  std::vector<double> exact;
  std::vector<double> approx;
};

inline constexpr double kRatioEpsilon = 1e-12;

/// Per pair: |jf_unprojected - exact| / max(|exact|, 1e-12); Pearson r of
/// jf_unprojected against exact across pairs.
CrossTermSummary cross_term_diagnostic(const ToyNetwork& net,
                                       std::span<const std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs);

/// <a, b>_F / (||a||_F ||b||_F). Throws ZeroNorm or DimMismatch.
double frobenius_cos(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// values[i][j] = jf_ntk(domain_i, cand_j), rows/cols sorted by SampleId.
/// Tiled and parallel over column blocks; every entry is accumulated in
/// ascending index order, so the result is bit-identical to the naive loop
/// for any thread count.
KernelMatrix assemble_kernel_matrix(std::span<const FeatureRecord> domain, std::span<const FeatureRecord> cand);

/// As above, but first checks that both files were projected with the same
/// seed and normalisation (SeedMismatch / NormalizationMismatch).
KernelMatrix assemble_kernel_matrix(const FeatureSet& domain, const FeatureSet& cand);

/// Kernel container (kind "kernel"): dim = columns, one f64 record per row,
/// column ids in the extension block.
std::string write_kernel_matrix(const std::string& path, const KernelMatrix& km);
KernelMatrix read_kernel_matrix(const std::string& path);

}  // namespace ntksel
