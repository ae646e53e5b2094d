#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace spindle {

/// One background thread firing callbacks at deadlines.
///
/// Callbacks run on the timer thread and must be cheap; anything heavy
/// belongs on an executor. Used to model waits (simulated network latency,
/// sleep workloads) without parking a pool worker.
class TimerService {
 public:
  using Clock = std::chrono::steady_clock;

  TimerService() = default;
  ~TimerService() { shutdown(); }
  TimerService(const TimerService&) = delete;
  TimerService& operator=(const TimerService&) = delete;

  void schedule_at(Clock::time_point deadline, std::function<void()> fn);
  void schedule_after(std::chrono::microseconds delay, std::function<void()> fn);

  /// Joins the timer thread; pending callbacks are dropped.
  void shutdown();

  std::size_t pending() const;

 private:
  struct Entry {
    Clock::time_point when;
    std::uint64_t id = 0;  // tie-break so equal deadlines fire in schedule order
    std::function<void()> fn;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      return a.when > b.when || (a.when == b.when && a.id > b.id);
    }
  };

  void run();
  void ensure_thread_locked();

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Entry> heap_;
  std::uint64_t next_id_ = 0;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace spindle
