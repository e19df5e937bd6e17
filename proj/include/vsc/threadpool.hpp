#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace vsc {

// Fixed-size pool driving index-parallel loops. Work items must be
// independent; callers that aggregate results do so after the loop, in index
// order, so the outcome never depends on scheduling. workers <= 1 runs inline.
class ThreadPool {
 public:
  explicit ThreadPool(int workers) : workers_(workers < 1 ? 1 : workers) {
    if (workers_ == 1) return;
    threads_.reserve(workers_ - 1);
    for (int t = 0; t < workers_ - 1; ++t) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    if (threads_.empty()) return;
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  int workers() const { return workers_; }

  void parallel_for(int n, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (workers_ == 1 || n == 1 || threads_.empty()) {
      for (int i = 0; i < n; ++i) fn(i);
      return;
    }
    {
      std::unique_lock<std::mutex> lock(mu_);
      fn_ = &fn;
      next_.store(0, std::memory_order_relaxed);
      limit_ = n;
      done_ = 0;
      ++generation_;
      ++active_;  // the calling thread participates
    }
    cv_.notify_all();
    drain();
    std::unique_lock<std::mutex> lock(mu_);
    --active_;
    // Both conditions matter: done_ == limit_ says every item ran; active_ ==
    // 0 says no worker can still touch this job's state, so the next job may
    // safely reset it.
    done_cv_.wait(lock, [this] { return done_ == limit_ && active_ == 0; });
    fn_ = nullptr;
  }

 private:
  void drain() {
    int ran = 0;
    while (true) {
      const int i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= limit_) break;
      (*fn_)(i);
      ++ran;
    }
    if (ran > 0) {
      std::unique_lock<std::mutex> lock(mu_);
      done_ += ran;
      if (done_ == limit_) done_cv_.notify_all();
    }
  }

  void worker_loop() {
    uint64_t seen = 0;
    while (true) {
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        ++active_;
      }
      drain();
      {
        std::unique_lock<std::mutex> lock(mu_);
        if (--active_ == 0 && done_ == limit_) done_cv_.notify_all();
      }
    }
  }

  const int workers_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int)>* fn_ = nullptr;
  std::atomic<int> next_{0};
  int limit_ = 0;
  int done_ = 0;
  int active_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace vsc
