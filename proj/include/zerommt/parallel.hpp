#pragma once

#include <cstddef>
#include <functional>

namespace zerommt {

/// Worker count: ZEROMMT_THREADS when set (>= 1), else the hardware concurrency.
int thread_budget();

/// Runs fn(i) for i in [0, n) on up to thread_budget() threads. Each index is
/// handled exactly once; callers write results into per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace zerommt
