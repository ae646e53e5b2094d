#include "spindle/executor.hpp"

namespace spindle {

ThreadPool::ThreadPool(int threads, std::string name)
    : threads_(threads), name_(std::move(name)), st_(std::make_shared<State>()) {
  if (threads < 1) throw ConfigError("thread pool size must be >= 1");
}

ThreadPool::~ThreadPool() { shutdown(std::chrono::milliseconds(2000)); }

void ThreadPool::start() {
  std::lock_guard lifecycle(lifecycle_mu_);
  if (started_ || shut_) return;
  started_ = true;
  {
    std::lock_guard lock(st_->mu);
    st_->live = threads_;
  }
  workers_.reserve(static_cast<std::size_t>(threads_));
  for (int i = 0; i < threads_; ++i) {
    workers_.emplace_back(&ThreadPool::worker_main, st_);
  }
}

bool ThreadPool::started() const {
  std::lock_guard lifecycle(lifecycle_mu_);
  return started_;
}

void ThreadPool::submit(Task t) {
  {
    std::lock_guard lock(st_->mu);
    if (st_->stop) throw Error("submit on shut-down pool '" + name_ + "'");
    st_->tasks.push_back(std::move(t));
  }
  st_->cv.notify_one();
}

bool ThreadPool::shutdown(std::chrono::milliseconds deadline) {
  std::lock_guard lifecycle(lifecycle_mu_);
  if (shut_) return true;
  shut_ = true;
  bool clean = true;
  {
    std::unique_lock lock(st_->mu);
    st_->stop = true;
    st_->cv.notify_all();
    if (started_) {
      clean = st_->idle_cv.wait_for(lock, deadline, [&] { return st_->live == 0; });
    }
  }
  for (auto& w : workers_) {
    if (clean) {
      w.join();
    } else {
      w.detach();
    }
  }
  workers_.clear();
  return clean;
}

void ThreadPool::worker_main(std::shared_ptr<State> st) {
  std::unique_lock lock(st->mu);
  for (;;) {
    st->cv.wait(lock, [&] { return st->stop || !st->tasks.empty(); });
    if (st->stop) break;
    Task t = std::move(st->tasks.front());
    st->tasks.pop_front();
    lock.unlock();
    t();
    lock.lock();
  }
  if (--st->live == 0) st->idle_cv.notify_all();
}

}  // namespace spindle
