#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <thread>
#include <vector>

namespace fracmap {

// Process-wide worker count. Reductions are deterministic at any setting:
// work is split into fixed-size chunks and partial results are combined in
// chunk order, so the bits do not depend on scheduling or thread count.
inline int& thread_count_ref() {
  static int count = [] {
    if (const char* env = std::getenv("FRACMAP_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return count;
}

inline int thread_count() { return thread_count_ref(); }
inline void set_thread_count(int t) { thread_count_ref() = t < 1 ? 1 : t; }

// Runs f(chunk_begin, chunk_end) over [begin, end) split into chunks of size
// `grain`. Writes must be per-index (gather style) to stay deterministic.
template <class F>
void parallel_for_chunks(std::size_t begin, std::size_t end, std::size_t grain, F&& f) {
  if (end <= begin) return;
  const std::size_t total = end - begin;
  const std::size_t nchunks = (total + grain - 1) / grain;
  const int workers = thread_count();
  if (workers <= 1 || nchunks <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t lo = begin + c * grain;
      f(lo, std::min(end, lo + grain));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t c = next.fetch_add(1);
      if (c >= nchunks) return;
      const std::size_t lo = begin + c * grain;
      f(lo, std::min(end, lo + grain));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// Deterministic sum reduction: term(lo, hi) returns the partial sum of one
// chunk; partials are added serially in chunk order.
template <class F>
double parallel_reduce_sum(std::size_t begin, std::size_t end, std::size_t grain, F&& term) {
  if (end <= begin) return 0.0;
  const std::size_t total = end - begin;
  const std::size_t nchunks = (total + grain - 1) / grain;
  std::vector<double> partial(nchunks, 0.0);
  parallel_for_chunks(0, nchunks, 1, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t c = c0; c < c1; ++c) {
      const std::size_t lo = begin + c * grain;
      partial[c] = term(lo, std::min(end, lo + grain));
    }
  });
  double sum = 0.0;
  for (double v : partial) sum += v;
  return sum;
}

}  // namespace fracmap
