#pragma once

// Process-wide worker count for batch-parallel inference (decoding and
// tracing). Each batch is computed independently, so results do not depend
// on the thread count. Training always runs on one thread.

#include <cstddef>
#include <functional>

namespace cu {

void set_num_threads(std::size_t n);  // 0 is treated as 1
std::size_t num_threads();

// Runs fn(i) for i in [0, n); the first exception is rethrown after all
// workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cu
