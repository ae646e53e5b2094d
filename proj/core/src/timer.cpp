#include "spindle/timer.hpp"

#include <algorithm>
#include <utility>

namespace spindle {

void TimerService::schedule_at(Clock::time_point deadline, std::function<void()> fn) {
  {
    std::lock_guard lock(mu_);
    if (stop_) return;
    ensure_thread_locked();
    heap_.push_back(Entry{deadline, next_id_++, std::move(fn)});
    std::push_heap(heap_.begin(), heap_.end(), Later{});
  }
  cv_.notify_one();
}

void TimerService::schedule_after(std::chrono::microseconds delay, std::function<void()> fn) {
  schedule_at(Clock::now() + delay, std::move(fn));
}

void TimerService::shutdown() {
  std::thread t;
  {
    std::lock_guard lock(mu_);
    stop_ = true;
    heap_.clear();
    t = std::move(thread_);
  }
  cv_.notify_all();
  if (t.joinable()) t.join();
}

std::size_t TimerService::pending() const {
  std::lock_guard lock(mu_);
  return heap_.size();
}

void TimerService::ensure_thread_locked() {
  if (!thread_.joinable()) thread_ = std::thread([this] { run(); });
}

void TimerService::run() {
  std::unique_lock lock(mu_);
  while (!stop_) {
    if (heap_.empty()) {
      cv_.wait(lock, [this] { return stop_ || !heap_.empty(); });
      continue;
    }
    auto when = heap_.front().when;
    if (Clock::now() < when) {
      cv_.wait_until(lock, when);
      continue;
    }
    std::pop_heap(heap_.begin(), heap_.end(), Later{});
    auto fn = std::move(heap_.back().fn);
    heap_.pop_back();
    lock.unlock();
    fn();
    lock.lock();
  }
}

}  // namespace spindle
