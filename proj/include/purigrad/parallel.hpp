#pragma once

#include <functional>

namespace purigrad {

/// Process-wide worker count used by replicate-level loops (EOT replicates,
/// validation replicates). 1 = sequential.
void set_default_workers(int workers);
int default_workers();

/// Runs fn(0..n-1), chunked over `workers` threads. Each index writes only
/// its own output slot, so results are schedule-invariant.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace purigrad
