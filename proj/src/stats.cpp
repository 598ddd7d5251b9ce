#include "ntksel/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ntksel/error.hpp"

namespace ntksel {
namespace {

bool is_constant(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double scale = std::max(std::abs(*lo), std::abs(*hi));
  return (*hi - *lo) <= 1e-12 * scale;
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::dim_mismatch, "pearson inputs differ in length");
  if (x.size() < 2) throw Error(ErrorCode::degenerate_variance, "need at least two points");
  if (is_constant(x) || is_constant(y)) {
    throw Error(ErrorCode::degenerate_variance, "all values equal; correlation undefined");
  }
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

double median(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::config, "median of an empty set");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

double binomial_upper_tail(std::uint64_t n, std::uint64_t k, double p) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double lp = std::log(p), lq = std::log1p(-p);
  const double ln_fact_n = std::lgamma(static_cast<double>(n) + 1.0);
  double total = 0.0;
  for (std::uint64_t i = k; i <= n; ++i) {
    const double di = static_cast<double>(i);
    const double log_term = ln_fact_n - std::lgamma(di + 1.0) - std::lgamma(static_cast<double>(n - i) + 1.0) +
                            di * lp + static_cast<double>(n - i) * lq;
    total += std::exp(log_term);
  }
  return std::min(1.0, total);
}

}  // namespace ntksel
