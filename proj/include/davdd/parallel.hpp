#pragma once

#include <cstddef>
#include <functional>

namespace davdd {

/// Requested worker count, capped by the DAVDD_FORGE_THREADS environment
/// variable when it holds a positive integer. Never less than 1.
std::size_t effective_jobs(std::size_t requested);

/// Calls fn(i) for every i in [0, n) on up to `jobs` threads. Each index runs
/// exactly once; if any call throws, the exception of the lowest failing index
/// is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace davdd
