#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "spindle/error.hpp"

namespace spindle {

/// Move-only callable wrapper; std::function requires copyable targets and
/// stage task closures capture move-only Items.
class Task {
 public:
  Task() = default;

  template <class F>
  Task(F&& f) : impl_(std::make_unique<Model<std::decay_t<F>>>(std::forward<F>(f))) {}

  void operator()() { impl_->call(); }
  explicit operator bool() const { return impl_ != nullptr; }

 private:
  struct Concept {
    virtual ~Concept() = default;
    virtual void call() = 0;
  };
  template <class F>
  struct Model final : Concept {
    explicit Model(F f) : fn(std::move(f)) {}
    void call() override { fn(); }
    F fn;
  };
  std::unique_ptr<Concept> impl_;
};

/// Fixed-size worker pool. Threads are spawned by start(), not the
/// constructor, so a pipeline does no work before its first consumption.
///
/// shutdown() waits for workers to go idle up to the deadline; workers still
/// stuck in user code past it are detached. Detached workers keep the queue
/// state alive through a shared_ptr, so late task completions stay safe.
class ThreadPool {
 public:
  explicit ThreadPool(int threads, std::string name = "pool");
  ~ThreadPool();
  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  void start();
  bool started() const;

  /// Throws Error after shutdown().
  void submit(Task t);

  /// Returns false when some worker had to be detached past the deadline.
  bool shutdown(std::chrono::milliseconds deadline = std::chrono::milliseconds(10000));

  int size() const { return threads_; }
  const std::string& name() const { return name_; }

 private:
  struct State {
    std::mutex mu;
    std::condition_variable cv;
    std::condition_variable idle_cv;
    std::deque<Task> tasks;
    bool stop = false;
    int live = 0;
  };
  static void worker_main(std::shared_ptr<State> st);

  int threads_;
  std::string name_;
  std::shared_ptr<State> st_;
  std::vector<std::thread> workers_;
  bool started_ = false;
  bool shut_ = false;
  mutable std::mutex lifecycle_mu_;
};

/// Which backend a stage's tasks run on. shared_pool is the pipeline-wide
/// worker pool sized by build(); the other kinds get a pool of their own.
struct ExecutorBinding {
  enum class Kind { shared_pool, dedicated_pool, subprocess_pool };

  Kind kind = Kind::shared_pool;
  int size = 1;
  std::string name = "shared";

  static ExecutorBinding shared() { return {}; }
  static ExecutorBinding dedicated(int size, std::string name = "dedicated") {
    return {Kind::dedicated_pool, size, std::move(name)};
  }
  static ExecutorBinding subprocess(int size, std::string name = "subprocess") {
    return {Kind::subprocess_pool, size, std::move(name)};
  }
};

}  // namespace spindle
