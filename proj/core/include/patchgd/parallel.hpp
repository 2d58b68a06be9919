#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

namespace patchgd::detail {

// One resident worker thread; the caller and the worker each take a
// contiguous half of the item range. The split depends only on the item
// count, and writers own disjoint slices, so parallel output is identical to
// serial output by construction.
class WorkerLane {
 public:
  static WorkerLane& instance() {
    static WorkerLane lane;
    return lane;
  }

  // Runs fn(0, 0, mid) on the caller and fn(1, mid, count) on the worker.
  void run(std::size_t count,
           const std::function<void(int, std::size_t, std::size_t)>& fn) {
    if (count == 0) return;
    const std::size_t mid = (count + 1) / 2;
    if (count < 2) {
      fn(0, 0, count);
      return;
    }
    std::exception_ptr worker_error;
    {
      std::unique_lock lock(mutex_);
      task_ = [&fn, mid, count, &worker_error]() {
        try {
          fn(1, mid, count);
        } catch (...) {
          worker_error = std::current_exception();
        }
      };
      task_done_ = false;
    }
    cv_.notify_one();

    std::exception_ptr caller_error;
    try {
      fn(0, 0, mid);
    } catch (...) {
      caller_error = std::current_exception();
    }
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [this] { return task_done_; });
    }
    if (caller_error) std::rethrow_exception(caller_error);
    if (worker_error) std::rethrow_exception(worker_error);
  }

  WorkerLane(const WorkerLane&) = delete;
  WorkerLane& operator=(const WorkerLane&) = delete;

 private:
  WorkerLane() {
    worker_ = std::thread([this] { loop(); });
  }

  ~WorkerLane() {
    {
      std::unique_lock lock(mutex_);
      stop_ = true;
    }
    cv_.notify_one();
    worker_.join();
  }

  void loop() {
    std::unique_lock lock(mutex_);
    for (;;) {
      cv_.wait(lock, [this] { return stop_ || task_ != nullptr; });
      if (stop_) return;
      auto task = std::move(task_);
      task_ = nullptr;
      lock.unlock();
      task();
      lock.lock();
      task_done_ = true;
      cv_.notify_all();
    }
  }

  std::thread worker_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::function<void()> task_;
  bool task_done_ = true;
  bool stop_ = false;
};

// Opt-in via PATCHGD_THREADS=2: on machines with few cores the handoff
// latency outweighs the small per-item kernels, so the default stays serial.
inline bool worker_lane_enabled() {
  static const bool enabled = [] {
    const char* env = std::getenv("PATCHGD_THREADS");
    return env != nullptr && std::atoi(env) > 1;
  }();
  return enabled;
}

// Splits [0, count) across the caller and the worker when the batch is big
// enough to amortize the handoff. Within a mode the output is deterministic:
// lanes own disjoint output slices, the split depends only on the count, and
// reductions combine lane partials in lane order.
template <typename Fn>
void split_items(std::size_t count, Fn&& fn) {
  if (count >= 8 && worker_lane_enabled()) {
    WorkerLane::instance().run(
        count, [&fn](int lane, std::size_t begin, std::size_t end) {
          fn(lane, begin, end);
        });
  } else {
    fn(0, 0, count);
  }
}

}  // namespace patchgd::detail
