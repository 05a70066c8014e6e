#pragma once

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "bwcloud/experiments.hpp"

namespace bwcloud {

/// Executor that runs tasks on `workers` threads pulling from a shared
/// counter. The first exception (in task order) is rethrown after all
/// threads join. One worker runs inline on the calling thread.
inline Executor thread_pool_executor(std::size_t workers) {
  return [workers](std::vector<Task>& tasks) {
    if (workers <= 1 || tasks.size() <= 1) {
      run_sequential(tasks);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(tasks.size());
    auto loop = [&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        try {
          tasks[i]();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    const std::size_t n = std::min(workers, tasks.size());
    for (std::size_t t = 1; t < n; ++t) pool.emplace_back(loop);
    loop();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  };
}

}  // namespace bwcloud
