#include "kinetos/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace kinetos {

std::size_t default_threads() {
  if (const char* env = std::getenv("KINETOS_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk) {
  if (n == 0) return;
  const std::size_t chunks = std::min(std::max<std::size_t>(threads, 1),
                                      std::max<std::size_t>(1, n / std::max<std::size_t>(min_chunk, 1)));
  if (chunks <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(chunks);
  pool.reserve(chunks - 1);
  auto run = [&](std::size_t c) {
    try {
      body(n * c / chunks, n * (c + 1) / chunks);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  for (std::size_t c = 1; c < chunks; ++c) pool.emplace_back(run, c);
  run(0);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace kinetos
