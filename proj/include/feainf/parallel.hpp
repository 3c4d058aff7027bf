#pragma once

#include <functional>

namespace feainf {

/// Worker count: FEAINF_THREADS when set (minimum 1), else hardware concurrency.
int thread_budget();

/// Runs fn(worker, index) for index in [0, n). Each worker id in [0, workers)
/// owns its slice of indices, so per-worker scratch state needs no locking.
/// Falls back to a plain loop when a single worker suffices.
void parallel_for(int n, int workers, const std::function<void(int, int)>& fn);

inline void parallel_for(int n, const std::function<void(int, int)>& fn) {
    parallel_for(n, thread_budget(), fn);
}

} // namespace feainf
