#pragma once

#include <cstddef>
#include <functional>

namespace ntksel {

/// Worker cap shared by every parallel loop. 0 restores the default
/// (NTKSEL_THREADS when set, otherwise hardware concurrency).
void set_max_threads(unsigned n);
unsigned max_threads();

/// Runs body(begin, end) over contiguous, disjoint slices of [0, n).
/// Callers write only to slots owned by their slice, so results do not
/// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace ntksel
