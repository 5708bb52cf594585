#pragma once

// Deterministic fan-out over an index range. Each index is processed by
// exactly one worker and writes only its own output slot, so results do not
// depend on the worker count.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace rwre {

inline int default_threads() {
  if (const char* v = std::getenv("RWRE_THREADS")) {
    try {
      int n = std::stoi(v);
      if (n >= 1) return n;
    } catch (...) {
    }
  }
  return 1;
}

// Worker count used by parallel_for when none is given. Set by the CLI.
inline int& thread_override() {
  static int n = 0;
  return n;
}
inline int active_threads() { return thread_override() > 0 ? thread_override() : default_threads(); }

namespace detail {
// Set on pool workers; nested calls then run inline.
inline bool& in_worker() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, int threads = 0) {
  if (threads <= 0) threads = detail::in_worker() ? 1 : active_threads();
  threads = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto work = [&] {
    detail::in_worker() = true;
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace rwre
