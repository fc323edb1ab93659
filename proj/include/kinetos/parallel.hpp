#pragma once

#include <cstddef>
#include <functional>

namespace kinetos {

// KINETOS_THREADS if set and positive, otherwise the hardware concurrency.
std::size_t default_threads();

// Calls body(begin, end) on contiguous chunks of [0, n). Chunk boundaries depend
// only on n and threads, never on scheduling.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 2048);

}  // namespace kinetos
