#include "wt/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace wt {

namespace {

int g_max_threads = 0;
thread_local bool tl_in_worker = false;

int detect_threads() {
  if (const char* env = std::getenv("WT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Persistent pool. A job is a range of fixed-size chunks; workers and the
// submitting thread pull chunk indices from a shared atomic counter. Job
// state is only mutated while every worker is parked (active_ == 0), which
// keeps stale workers from observing a half-initialized job.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t n_chunks, int64_t grain, int64_t n,
           const std::function<void(int64_t, int64_t)>& fn) {
    {
      std::unique_lock<std::mutex> lk(mu_);
      idle_cv_.wait(lk, [this] { return active_ == 0; });
      fn_ = &fn;
      grain_ = grain;
      n_ = n;
      n_chunks_ = n_chunks;
      next_chunk_.store(0, std::memory_order_relaxed);
      pending_.store(n_chunks, std::memory_order_relaxed);
      ++generation_;
    }
    cv_.notify_all();
    // The submitting thread helps out; flag it so nested parallel_for calls
    // from inside chunks run inline instead of clobbering this job.
    tl_in_worker = true;
    claim_loop();
    tl_in_worker = false;
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_.load(std::memory_order_acquire) == 0; });
  }

 private:
  void claim_loop() {
    for (;;) {
      const int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= n_chunks_) return;
      const int64_t b = c * grain_;
      const int64_t e = std::min<int64_t>(b + grain_, n_);
      (*fn_)(b, e);
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  void worker_loop() {
    tl_in_worker = true;
    uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        ++active_;
      }
      claim_loop();
      {
        std::lock_guard<std::mutex> lk(mu_);
        --active_;
        if (active_ == 0) idle_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::condition_variable idle_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  int64_t grain_ = 1;
  int64_t n_ = 0;
  int64_t n_chunks_ = 0;
  std::atomic<int64_t> next_chunk_{0};
  std::atomic<int64_t> pending_{0};
  uint64_t generation_ = 0;
  int active_ = 0;
  bool stop_ = false;
};

Pool& pool() {
  static Pool p(max_threads() - 1);
  return p;
}

}  // namespace

int max_threads() {
  if (g_max_threads == 0) g_max_threads = detect_threads();
  return g_max_threads;
}

void set_max_threads(int n) {
  if (n >= 1) g_max_threads = n;
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  if (grain < 1) grain = 1;
  const int64_t n_chunks = (n + grain - 1) / grain;
  if (tl_in_worker || max_threads() <= 1 || n_chunks <= 1) {
    fn(0, n);
    return;
  }
  pool().run(n_chunks, grain, n, fn);
}

}  // namespace wt
