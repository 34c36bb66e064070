// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>
#include <vector>

namespace dmnn {

/// Worker-thread cap shared by the compute kernels. Defaults to 1 so runs
/// are sequential unless the caller opts in (env DMNN_THREADS via the CLI).
inline int& detail_max_threads() {
  static int value = 1;
  return value;
}

inline void set_max_threads(int n) { detail_max_threads() = n < 1 ? 1 : n; }
inline int max_threads() { return detail_max_threads(); }

/// Runs fn(begin, end) over a fixed contiguous partition of [0, n).
/// The partition depends only on (n, max_threads), and every index is
/// processed by exactly one chunk in its natural order, so results that
/// write disjoint outputs are bitwise independent of the thread count.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int threads = std::min<std::int64_t>(max_threads(), n);
  if (threads <= 1) {
    if (n > 0) fn(std::int64_t{0}, n);
    return;
  }
  const std::int64_t chunk = (n + threads - 1) / threads;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads) - 1);
  for (int t = 1; t < threads; ++t) {
    const std::int64_t b = t * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::int64_t{0}, std::min<std::int64_t>(n, chunk));
  for (auto& th : pool) th.join();
}

/// Number of chunks parallel_for would use; callers that reduce partial
/// results must iterate chunks in index order.
inline int plan_chunks(std::int64_t n) {
  return static_cast<int>(std::min<std::int64_t>(max_threads(), std::max<std::int64_t>(n, 1)));
}

}  // namespace dmnn
