#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "spindle/wire.hpp"

namespace spindle {

/// bytes -> bytes functions callable inside subprocess workers.
///
/// Workers are re-executions of the current binary, so parent and worker see
/// the same registrations as long as they happen before the pool starts (and
/// before maybe_run_worker() in main). The startup handshake exchanges a
/// digest of the registered names to fail fast on drift.
class FunctionRegistry {
 public:
  using Fn = std::function<Bytes(const Bytes&)>;

  static FunctionRegistry& global();

  void register_fn(std::string name, Fn fn);
  const Fn* find(const std::string& name) const;
  std::uint64_t digest() const;  // order-independent, includes protocol version
  std::vector<std::string> names() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, Fn> fns_;
};

inline constexpr const char* kWorkerFlag = "--spindle-subprocess-worker";

/// Call first thing in main(). When this process was spawned as a pool
/// worker it serves the framed protocol on stdin/stdout until shutdown and
/// returns true; the caller should then exit 0.
bool maybe_run_worker(int argc, char** argv);

struct RemoteResult {
  bool ok = false;
  Bytes value;
  std::string error;
};

struct ShutdownStatus {
  int exited = 0;
  int killed = 0;  // stragglers force-killed past the deadline
  bool clean() const { return killed == 0; }
};

struct IpcCounters {
  std::uint64_t calls_encoded = 0;
  std::uint64_t results_decoded = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t workers_respawned = 0;
};

/// Pool of subprocess workers speaking the wire protocol over pipes.
///
/// start() spawns all workers at once and then waits for their handshakes,
/// so pool startup costs max(worker init), not the sum. Each worker executes
/// one call at a time; a crashed worker fails its in-flight task (no retry)
/// and is respawned.
class SubprocessPool {
 public:
  explicit SubprocessPool(int workers, std::string name = "subprocess");
  ~SubprocessPool();
  SubprocessPool(const SubprocessPool&) = delete;
  SubprocessPool& operator=(const SubprocessPool&) = delete;

  void start();
  bool started() const;

  /// Sends opcode shutdown, waits up to `deadline` for workers to exit, then
  /// SIGKILLs stragglers.
  ShutdownStatus shutdown(std::chrono::milliseconds deadline = std::chrono::milliseconds(2000));

  /// Asynchronous form used by the pipeline; `cb` runs on a pool-internal
  /// thread and must be cheap. After shutdown the callback fails immediately.
  void submit(const std::string& func, Bytes payload, std::function<void(RemoteResult)> cb);

  /// Synchronous convenience; throws Error on an error result.
  Bytes call(const std::string& func, Bytes payload);

  IpcCounters counters() const;
  int size() const { return size_; }
  const std::string& name() const { return name_; }

 private:
  struct Worker;
  struct Pending {
    std::string func;
    Bytes payload;
    std::function<void(RemoteResult)> cb;
  };

  void spawn_locked(Worker& w);
  void reader_main(std::shared_ptr<Worker> w);
  bool dispatch_to(Worker& w, Pending p);  // returns false if the write failed
  void pump_queue();
  void fail_all_pending(const std::string& why);

  const int size_;
  const std::string name_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::shared_ptr<Worker>> workers_;
  std::deque<Pending> queue_;
  std::uint64_t next_task_id_ = 1;  // 0 is the handshake
  bool started_ = false;
  bool stopping_ = false;
  int live_readers_ = 0;

  std::atomic<std::uint64_t> calls_encoded_{0};
  std::atomic<std::uint64_t> results_decoded_{0};
  std::atomic<std::uint64_t> bytes_sent_{0};
  std::atomic<std::uint64_t> bytes_received_{0};
  std::atomic<std::uint64_t> workers_respawned_{0};
};

}  // namespace spindle
