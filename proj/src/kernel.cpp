#include "ntksel/kernel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "ntksel/parallel.hpp"
#include "ntksel/stats.hpp"

namespace ntksel {
namespace {

template <typename T>
double dot_ascending(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::dim_mismatch,
                "vectors of length " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += static_cast<double>(u[i]) * static_cast<double>(v[i]);
  return acc;
}

std::vector<const FeatureRecord*> sorted_by_id(std::span<const FeatureRecord> recs) {
  std::vector<const FeatureRecord*> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
  return out;
}

// sum_k <row_k(a), row_k(b)>, each row product accumulated in ascending
// index order so that a one-output network reproduces jf exactly.
double trace_contract(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  double total = 0.0;
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < a.cols(); ++i) acc += a(k, i) * b(k, i);
    total += acc;
  }
  return total;
}

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 8;

}  // namespace

double jf_ntk(std::span<const float> u, std::span<const float> v) { return dot_ascending(u, v); }
double jf_ntk(std::span<const double> u, std::span<const double> v) { return dot_ascending(u, v); }

double exact_ntk(const ToyNetwork& net, std::span<const double> x, std::span<const double> x2) {
  const Eigen::MatrixXd j1 = jacobian(net, x);
  const Eigen::MatrixXd j2 = jacobian(net, x2);
  return trace_contract(j1, j2);
}

double jf_ntk_unprojected(const ToyNetwork& net, std::span<const double> x, std::span<const double> x2) {
  const Eigen::VectorXd g1 = summed_output_gradient(net, x).flat;
  const Eigen::VectorXd g2 = summed_output_gradient(net, x2).flat;
  return dot_ascending<double>({g1.data(), static_cast<std::size_t>(g1.size())},
                               {g2.data(), static_cast<std::size_t>(g2.size())});
}

Eigen::MatrixXd exact_ntk_gram(const ToyNetwork& net, std::span<const Eigen::VectorXd> inputs) {
  const auto n = static_cast<Eigen::Index>(inputs.size());
  std::vector<Eigen::MatrixXd> jac;
  jac.reserve(inputs.size());
  for (const auto& x : inputs) jac.push_back(jacobian(net, {x.data(), static_cast<std::size_t>(x.size())}));
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      g(i, j) = g(j, i) = trace_contract(jac[i], jac[j]);
    }
  }
  return g;
}

Eigen::MatrixXd exact_ntk_block(const ToyNetwork& net, std::span<const Eigen::VectorXd> inputs) {
  const auto d = static_cast<Eigen::Index>(net.output_dim());
  const auto p = static_cast<Eigen::Index>(net.adapter_param_count());
  Eigen::MatrixXd stacked(static_cast<Eigen::Index>(inputs.size()) * d, p);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& x = inputs[i];
    stacked.middleRows(static_cast<Eigen::Index>(i) * d, d) =
        jacobian(net, {x.data(), static_cast<std::size_t>(x.size())});
  }
  Eigen::MatrixXd k = stacked * stacked.transpose();
  // GEMM output is symmetric only up to rounding; make it exact.
  k = (0.5 * (k + k.transpose())).eval();
  return k;
}

CrossTermSummary cross_term_diagnostic(const ToyNetwork& net,
                                       std::span<const std::pair<Eigen::VectorXd, Eigen::VectorXd>> pairs) {
  if (pairs.size() < 2) throw Error(ErrorCode::config, "cross-term diagnostic needs at least two pairs");
  CrossTermSummary s;
  std::vector<double> ratios;
  for (const auto& [x, x2] : pairs) {
    const std::span<const double> a{x.data(), static_cast<std::size_t>(x.size())};
    const std::span<const double> b{x2.data(), static_cast<std::size_t>(x2.size())};
    const double e = exact_ntk(net, a, b);
    const double j = jf_ntk_unprojected(net, a, b);
    s.exact.push_back(e);
    s.approx.push_back(j);
    ratios.push_back(std::abs(j - e) / std::max(std::abs(e), kRatioEpsilon));
  }
  s.median_ratio = median(ratios);
  s.max_ratio = *std::max_element(ratios.begin(), ratios.end());
  s.pearson_r = pearson(s.approx, s.exact);
  return s;
}

double frobenius_cos(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::dim_mismatch, "kernel shapes " + std::to_string(a.rows()) + "x" +
                                             std::to_string(a.cols()) + " and " + std::to_string(b.rows()) +
                                             "x" + std::to_string(b.cols()));
  }
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::zero_norm, "kernel with zero Frobenius norm");
  return a.cwiseProduct(b).sum() / (na * nb);
}

KernelMatrix assemble_kernel_matrix(std::span<const FeatureRecord> domain, std::span<const FeatureRecord> cand) {
  if (domain.empty() || cand.empty()) throw Error(ErrorCode::empty_matrix, "kernel with no rows or columns");
  const auto rows = sorted_by_id(domain);
  const auto cols = sorted_by_id(cand);
  const std::size_t p = rows.front()->vector.size();
  for (const auto* r : rows) {
    if (r->vector.size() != p) throw Error(ErrorCode::dim_mismatch, r->id.str() + " has a different dimension");
  }
  for (const auto* c : cols) {
    if (c->vector.size() != p) throw Error(ErrorCode::dim_mismatch, c->id.str() + " has a different dimension");
  }

  KernelMatrix km;
  for (const auto* r : rows) km.row_ids.push_back(r->id);
  for (const auto* c : cols) km.col_ids.push_back(c->id);
  const std::size_t n_rows = rows.size(), n_cols = cols.size();
  km.values.resize(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(n_cols));

  const std::vector<float> zeros(p, 0.0f);
  const std::size_t col_blocks = (n_cols + kTileCols - 1) / kTileCols;
  parallel_for(col_blocks, [&](std::size_t begin, std::size_t end) {
    // Column block transposed to k-major doubles; each of the 32 tile
    // accumulators still sums its own products in ascending k.
    std::vector<double> bt(p * kTileCols);
    for (std::size_t cb = begin; cb < end; ++cb) {
      const std::size_t c0 = cb * kTileCols;
      const std::size_t nc = std::min(kTileCols, n_cols - c0);
      for (std::size_t c = 0; c < kTileCols; ++c) {
        const float* src = c < nc ? cols[c0 + c]->vector.data() : zeros.data();
        for (std::size_t k = 0; k < p; ++k) bt[k * kTileCols + c] = src[k];
      }
      for (std::size_t r0 = 0; r0 < n_rows; r0 += kTileRows) {
        const std::size_t nr = std::min(kTileRows, n_rows - r0);
        std::array<const float*, kTileRows> a{};
        for (std::size_t r = 0; r < kTileRows; ++r) a[r] = r < nr ? rows[r0 + r]->vector.data() : zeros.data();
        double acc[kTileRows][kTileCols] = {};
        for (std::size_t k = 0; k < p; ++k) {
          const double* b = &bt[k * kTileCols];
          for (std::size_t r = 0; r < kTileRows; ++r) {
            const double av = a[r][k];
            for (std::size_t c = 0; c < kTileCols; ++c) acc[r][c] += av * b[c];
          }
        }
        for (std::size_t r = 0; r < nr; ++r) {
          for (std::size_t c = 0; c < nc; ++c) {
            km.values(static_cast<Eigen::Index>(r0 + r), static_cast<Eigen::Index>(c0 + c)) = acc[r][c];
          }
        }
      }
    }
  });
  return km;
}

KernelMatrix assemble_kernel_matrix(const FeatureSet& domain, const FeatureSet& cand) {
  const auto& hd = domain.header;
  const auto& hc = cand.header;
  if (hd.kind != FeatureKind::gradient || hc.kind != FeatureKind::gradient) {
    throw Error(ErrorCode::bad_kind, "kernel assembly needs two gradient files");
  }
  if (hd.dim != hc.dim) {
    throw Error(ErrorCode::dim_mismatch,
                "gradient dims differ: " + std::to_string(hd.dim) + " vs " + std::to_string(hc.dim));
  }
  const bool pd = hd.has_flag(header_flags::projected), pc = hc.has_flag(header_flags::projected);
  if (pd != pc) throw Error(ErrorCode::normalization_mismatch, "only one side is projected");
  if (pd && hd.proj_seed != hc.proj_seed) {
    throw Error(ErrorCode::seed_mismatch, "projection seeds differ: " + std::to_string(hd.proj_seed) + " vs " +
                                              std::to_string(hc.proj_seed));
  }
  if (hd.has_flag(header_flags::seq_len_normalized) != hc.has_flag(header_flags::seq_len_normalized) ||
      hd.has_flag(header_flags::grad_scaled) != hc.has_flag(header_flags::grad_scaled) ||
      hd.grad_scale != hc.grad_scale) {
    throw Error(ErrorCode::normalization_mismatch, "domain and candidate gradients were normalised differently");
  }
  KernelMatrix km = assemble_kernel_matrix(domain.records, cand.records);
  km.proj_seed = hd.proj_seed;
  return km;
}

std::string write_kernel_matrix(const std::string& path, const KernelMatrix& km) {
  if (static_cast<std::size_t>(km.values.rows()) != km.row_ids.size() ||
      static_cast<std::size_t>(km.values.cols()) != km.col_ids.size()) {
    throw Error(ErrorCode::dim_mismatch, "kernel ids do not match its shape");
  }
  FeatureFileHeader header;
  header.kind = FeatureKind::kernel;
  header.dim = static_cast<std::uint32_t>(km.col_ids.size());
  header.proj_seed = km.proj_seed;
  wire::put_u64(header.extension, km.col_ids.size());
  for (const auto& id : km.col_ids) wire::put_id(header.extension, id);
  FeatureWriter writer(path, header);
  WideRecord rec;
  for (std::size_t i = 0; i < km.row_ids.size(); ++i) {
    rec.id = km.row_ids[i];
    rec.vector.resize(km.col_ids.size());
    for (std::size_t j = 0; j < km.col_ids.size(); ++j) {
      rec.vector[j] = km.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    writer.write(rec);
  }
  return writer.finish();
}

KernelMatrix read_kernel_matrix(const std::string& path) {
  FeatureReader reader(path);
  const auto& header = reader.header();
  if (header.kind != FeatureKind::kernel) {
    throw Error(ErrorCode::bad_kind, "'" + path + "' is a " + std::string(to_string(header.kind)) + " file");
  }
  KernelMatrix km;
  km.proj_seed = header.proj_seed;
  wire::Cursor c(header.extension);
  const std::uint64_t n_cols = c.u64();
  if (n_cols != header.dim) throw Error(ErrorCode::dim_mismatch, "'" + path + "' column list disagrees with dim");
  for (std::uint64_t j = 0; j < n_cols; ++j) km.col_ids.push_back(c.id());
  std::vector<std::vector<double>> rows;
  WideRecord rec;
  while (reader.next(rec)) {
    km.row_ids.push_back(rec.id);
    rows.push_back(rec.vector);
  }
  km.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_cols));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < n_cols; ++j) {
      km.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return km;
}

}  // namespace ntksel
