#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace megabyte {

// Worker count from MEGABYTE_THREADS (0 or unset means hardware concurrency).
inline std::size_t thread_count() {
  static const std::size_t count = [] {
    std::size_t n = 0;
    if (const char* env = std::getenv("MEGABYTE_THREADS")) {
      try {
        n = static_cast<std::size_t>(std::stoul(env));
      } catch (...) {
        n = 0;
      }
    }
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    return n;
  }();
  return count;
}

// Runs fn(begin, end) over a static partition of [0, n). Each index is owned
// by exactly one worker, so per-index reduction order never depends on the
// thread count and results stay bit-identical to the serial order.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  constexpr std::size_t kMinWork = 1 << 16;
  if (workers <= 1 || n * work_per_item < kMinWork) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
}

}  // namespace megabyte
