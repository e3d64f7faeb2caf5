// Copyright 2026 The FrostQ Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace frostq {

/// Fixed-size worker pool. Work is split into contiguous index ranges whose
/// boundaries depend only on the task count and thread count, so kernels that
/// write disjoint outputs per index are deterministic.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int num_threads() const noexcept { return num_threads_; }

  void set_num_threads(int n) {
    n = std::max(1, n);
    if (n == num_threads_) return;
    stop_workers();
    num_threads_ = n;
    start_workers();
  }

  /// Runs fn(begin, end) over [0, count) split into num_threads() chunks.
  void parallel_for(std::int64_t count,
                    const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (count <= 0) return;
    const int chunks = static_cast<int>(
        std::min<std::int64_t>(num_threads_, count));
    // Nested calls run inline; the pool holds a single job at a time.
    if (chunks == 1 || inside_job()) {
      fn(0, count);
      return;
    }
    std::unique_lock lock(mu_);
    job_ = &fn;
    job_count_ = count;
    job_chunks_ = chunks;
    pending_ = chunks - 1;
    ++generation_;
    cv_.notify_all();
    lock.unlock();

    inside_job() = true;
    run_chunk(0);
    inside_job() = false;

    lock.lock();
    done_cv_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  static bool& inside_job() {
    thread_local bool flag = false;
    return flag;
  }

  void run_chunk(int chunk) {
    const std::int64_t per = (job_count_ + job_chunks_ - 1) / job_chunks_;
    const std::int64_t begin = std::min<std::int64_t>(chunk * per, job_count_);
    const std::int64_t end = std::min<std::int64_t>(begin + per, job_count_);
    if (begin < end) (*job_)(begin, end);
  }

  void worker(int index, std::uint64_t seen) {
    inside_job() = true;
    for (;;) {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      const bool active = index + 1 < job_chunks_;
      lock.unlock();
      if (active) {
        run_chunk(index + 1);
        lock.lock();
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  void start_workers() {
    stop_ = false;
    // Workers only react to jobs posted after they exist.
    const std::uint64_t gen = generation_;
    for (int i = 0; i + 1 < num_threads_; ++i) {
      workers_.emplace_back([this, i, gen] { worker(i, gen); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  int num_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
  std::int64_t job_count_ = 0;
  int job_chunks_ = 0;
  int pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_num_threads(n); }
inline int num_threads() { return ThreadPool::instance().num_threads(); }

inline void parallel_for(
    std::int64_t count,
    const std::function<void(std::int64_t, std::int64_t)>& fn) {
  ThreadPool::instance().parallel_for(count, fn);
}

/// Keeps freed activation buffers in the heap instead of handing them back
/// to the kernel, which otherwise page-faults every large tensor allocation.
/// Call once at process start.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace frostq
