// Index-parallel loops capped by COUPLED_FLOW_THREADS.
#pragma once

#include <cstddef>
#include <functional>

namespace cflow {

// Worker cap: COUPLED_FLOW_THREADS if set to a positive integer, else the machine default.
int worker_count();

// Runs body(i) for i in [0, n). Bodies must write only to their own slot; callers
// reduce afterwards in index order so results do not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace cflow
