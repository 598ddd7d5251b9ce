#pragma once

#include <cstdint>
#include <span>

namespace ntksel {

/// Pearson correlation. Throws DegenerateVariance when either side is
/// constant (spread below 1e-12 of its magnitude).
double pearson(std::span<const double> x, std::span<const double> y);

double median(std::span<const double> values);

/// P(X >= k) for X ~ Binomial(n, p), summed in log space.
double binomial_upper_tail(std::uint64_t n, std::uint64_t k, double p);

}  // namespace ntksel
