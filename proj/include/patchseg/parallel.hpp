#pragma once

#include <cstddef>
#include <functional>

namespace patchseg {

/// Worker cap: PATCHSEG_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
unsigned worker_count();

/// Runs task(i) for i in [0, tasks) on up to worker_count() threads. Tasks
/// must write to disjoint outputs. The first exception is rethrown after all
/// workers finish.
void parallel_for(std::size_t tasks, const std::function<void(std::size_t)>& task);

}  // namespace patchseg
