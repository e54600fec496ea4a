#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace edgeless {

// --jobs default: LC_THREADS env var, else hardware concurrency.
inline int default_jobs() {
  if (const char* env = std::getenv("LC_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs fn(0..count-1) over `jobs` worker threads (jobs <= 0 picks the
// default). Work items must be independent; the first exception (lowest
// item index) is rethrown after all workers join, so failures are
// deterministic regardless of scheduling.
template <typename Fn>
void parallel_for(int jobs, int count, Fn&& fn) {
  if (count <= 0) return;
  if (jobs <= 0) jobs = default_jobs();
  jobs = std::min(jobs, count);
  if (jobs == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1, std::memory_order_relaxed);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(jobs);
  for (int w = 0; w < jobs; ++w) threads.emplace_back(worker);
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace edgeless
