// Bounded worker pool whose results are committed strictly in task order.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace forge::detail {

/// Runs work(i) for i in [0, n) on up to `workers` threads and calls commit(i, result)
/// for i = 0, 1, 2, ... in order, from whichever thread completes the next slot.
/// The first exception from work or commit stops further scheduling and is rethrown.
template <typename Result, typename Work, typename Commit>
void run_ordered(std::size_t n, std::size_t workers, Work work, Commit commit) {
  if (n == 0) return;
  workers = std::max<std::size_t>(1, std::min(workers, n));

  std::vector<std::optional<Result>> slots(n);
  std::atomic<std::size_t> next_task{0};
  std::size_t next_commit = 0;
  std::mutex mu;
  std::exception_ptr failure;
  std::atomic<bool> stop{false};

  auto drain = [&] {
    // Caller holds `mu`.
    while (next_commit < n && slots[next_commit]) {
      commit(next_commit, std::move(*slots[next_commit]));
      slots[next_commit].reset();
      ++next_commit;
    }
  };

  auto loop = [&] {
    while (!stop.load()) {
      std::size_t i = next_task.fetch_add(1);
      if (i >= n) return;
      try {
        Result r = work(i);
        std::lock_guard lock(mu);
        if (stop.load()) return;
        slots[i].emplace(std::move(r));
        drain();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        stop.store(true);
        return;
      }
    }
  };

  if (workers == 1) {
    loop();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) threads.emplace_back(loop);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace forge::detail
