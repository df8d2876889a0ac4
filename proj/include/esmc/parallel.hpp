#pragma once

#include <cstddef>
#include <functional>

namespace esmc {

// Worker count: ESMC_THREADS when set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t thread_budget();

// Runs body(i) for every i in [0, n) on up to thread_budget() threads. Each
// index is visited exactly once; callers write results into slot i so the
// outcome never depends on scheduling. The first exception thrown by any
// body is rethrown after all workers join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace esmc
