#pragma once

#include <cstddef>
#include <functional>

namespace cvthead::numerics {

// Worker count from CVTHEAD_THREADS (default 1, clamped to [1, 256]).
std::size_t thread_budget();

// Runs fn(i) for i in [0, n) on up to `threads` workers with a static
// contiguous partition. Results must not depend on scheduling: each index is
// processed by exactly one worker and callers write to disjoint slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = thread_budget());

}  // namespace cvthead::numerics
