#pragma once

#include <functional>

namespace proxmed {

// Runs fn(i) for i in [0, n_tasks) on up to n_threads workers.
// Tasks must be independent; the first exception thrown by any task is
// rethrown on the calling thread after all workers join.
void parallel_for(int n_tasks, int n_threads, const std::function<void(int)>& fn);

// Worker count used when the caller passes threads <= 0.
int default_threads();

}  // namespace proxmed
