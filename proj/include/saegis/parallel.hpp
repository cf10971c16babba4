#pragma once

#include <cstddef>
#include <functional>

namespace saegis {

/// Caps the number of worker threads used by parallel_for. 0 restores the default
/// (hardware concurrency).
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs fn(i) for every i in [0, n). Work is split into contiguous chunks; callers
/// must only write to per-index slots so results do not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace saegis
