#include "spindle/subprocess.hpp"

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <thread>

extern char** environ;

namespace spindle {

namespace {

std::uint64_t fnv1a64(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

}  // namespace

FunctionRegistry& FunctionRegistry::global() {
  static FunctionRegistry reg;
  return reg;
}

void FunctionRegistry::register_fn(std::string name, Fn fn) {
  std::lock_guard lock(mu_);
  fns_[std::move(name)] = std::move(fn);
}

const FunctionRegistry::Fn* FunctionRegistry::find(const std::string& name) const {
  std::lock_guard lock(mu_);
  auto it = fns_.find(name);
  return it == fns_.end() ? nullptr : &it->second;
}

std::uint64_t FunctionRegistry::digest() const {
  std::lock_guard lock(mu_);
  std::uint64_t h = 0xcbf29ce484222325ull;
  std::uint32_t v = wire::kProtocolVersion;
  h = fnv1a64(h, &v, sizeof v);
  for (const auto& [name, fn] : fns_) {  // std::map keeps names sorted
    h = fnv1a64(h, name.data(), name.size());
    h = fnv1a64(h, "\n", 1);
  }
  return h;
}

std::vector<std::string> FunctionRegistry::names() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  out.reserve(fns_.size());
  for (const auto& [name, fn] : fns_) out.push_back(name);
  return out;
}

// ---------------------------------------------------------------------------
// Worker side

namespace {

void run_worker_loop(int in_fd, int out_fd) {
  if (const char* d = std::getenv("SPINDLE_WORKER_INIT_DELAY_MS")) {
    // Simulated library-initialization cost, used by launch-time tests.
    std::this_thread::sleep_for(std::chrono::milliseconds(std::atol(d)));
  }
  auto& reg = FunctionRegistry::global();

  Bytes hello;
  wire::put_u32(hello, wire::kProtocolVersion);
  wire::put_u64(hello, reg.digest());
  wire::write_frame(out_fd, wire::Frame{wire::Opcode::result, 0, std::move(hello)});

  for (;;) {
    std::optional<wire::Frame> f;
    try {
      f = wire::read_frame(in_fd);
    } catch (const std::exception&) {
      return;  // torn pipe; parent is gone or killed us mid-frame
    }
    if (!f || f->opcode == wire::Opcode::shutdown) return;
    if (f->opcode != wire::Opcode::call) {
      wire::write_frame(out_fd,
                        wire::Frame{wire::Opcode::error, f->task_id, to_bytes("unexpected opcode")});
      continue;
    }
    try {
      auto [name, args] = wire::decode_call_payload(f->payload);
      const auto* fn = reg.find(name);
      if (fn == nullptr) {
        wire::write_frame(out_fd, wire::Frame{wire::Opcode::error, f->task_id,
                                              to_bytes("unregistered function: " + name)});
        continue;
      }
      Bytes out = (*fn)(args);
      wire::write_frame(out_fd, wire::Frame{wire::Opcode::result, f->task_id, std::move(out)});
    } catch (const std::exception& e) {
      wire::write_frame(out_fd, wire::Frame{wire::Opcode::error, f->task_id, to_bytes(e.what())});
    }
  }
}

}  // namespace

bool maybe_run_worker(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], kWorkerFlag) == 0) {
      run_worker_loop(STDIN_FILENO, STDOUT_FILENO);
      return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Parent side

struct SubprocessPool::Worker {
  pid_t pid = -1;
  int wfd = -1;
  int rfd = -1;
  bool busy = false;
  bool dead = false;
  std::uint64_t inflight_task = 0;
  std::function<void(RemoteResult)> inflight_cb;
  bool handshaken = false;
  std::string handshake_error;
};

SubprocessPool::SubprocessPool(int workers, std::string name)
    : size_(workers), name_(std::move(name)) {
  if (workers < 1) throw ConfigError("subprocess pool size must be >= 1");
}

SubprocessPool::~SubprocessPool() { shutdown(std::chrono::milliseconds(2000)); }

void SubprocessPool::spawn_locked(Worker& w) {
  int to_child[2], from_child[2];
  if (pipe2(to_child, O_CLOEXEC) != 0 || pipe2(from_child, O_CLOEXEC) != 0) {
    throw Error(std::string("pipe2 failed: ") + std::strerror(errno));
  }

  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&fa, from_child[1], STDOUT_FILENO);

  char exe[] = "/proc/self/exe";
  char flag[] = "--spindle-subprocess-worker";
  char* argv[] = {exe, flag, nullptr};
  pid_t pid = -1;
  int rc = posix_spawn(&pid, exe, &fa, nullptr, argv, environ);
  posix_spawn_file_actions_destroy(&fa);
  close(to_child[0]);
  close(from_child[1]);
  if (rc != 0) {
    close(to_child[1]);
    close(from_child[0]);
    throw Error(std::string("posix_spawn failed: ") + std::strerror(rc));
  }

  w.pid = pid;
  w.wfd = to_child[1];
  w.rfd = from_child[0];
  w.busy = false;
  w.dead = false;
  w.handshaken = false;
  w.handshake_error.clear();
}

void SubprocessPool::start() {
  std::unique_lock lock(mu_);
  if (started_ || stopping_) return;
  ::signal(SIGPIPE, SIG_IGN);  // dead-worker writes surface as EPIPE, not a signal

  workers_.reserve(static_cast<std::size_t>(size_));
  for (int i = 0; i < size_; ++i) {
    auto w = std::make_shared<Worker>();
    spawn_locked(*w);  // spawn everything first so workers initialize in parallel
    workers_.push_back(std::move(w));
  }
  for (auto& w : workers_) {
    ++live_readers_;
    std::thread(&SubprocessPool::reader_main, this, w).detach();
  }
  started_ = true;

  bool ok = cv_.wait_for(lock, std::chrono::seconds(30), [&] {
    for (const auto& w : workers_) {
      if (!w->handshaken && w->handshake_error.empty()) return false;
    }
    return true;
  });
  std::string err;
  for (const auto& w : workers_) {
    if (!w->handshake_error.empty()) err = w->handshake_error;
  }
  if (!ok && err.empty()) err = "worker handshake timed out";
  if (!err.empty()) {
    lock.unlock();
    shutdown(std::chrono::milliseconds(500));
    throw ProtocolError("pool '" + name_ + "' startup failed: " + err);
  }
}

bool SubprocessPool::started() const {
  std::lock_guard lock(mu_);
  return started_;
}

void SubprocessPool::submit(const std::string& func, Bytes payload,
                            std::function<void(RemoteResult)> cb) {
  Pending p{func, std::move(payload), std::move(cb)};
  {
    std::lock_guard lock(mu_);
    if (!started_ || stopping_) {
      auto cb2 = std::move(p.cb);
      cb2(RemoteResult{false, {}, "subprocess pool not running"});
      return;
    }
    queue_.push_back(std::move(p));
  }
  pump_queue();
}

bool SubprocessPool::dispatch_to(Worker& w, Pending p) {
  std::uint64_t id;
  {
    std::lock_guard lock(mu_);
    id = next_task_id_++;
    w.inflight_task = id;
    w.inflight_cb = std::move(p.cb);
  }
  wire::Frame f{wire::Opcode::call, id,
                wire::encode_call_payload(p.func, std::span<const std::uint8_t>(p.payload))};
  try {
    Bytes encoded = wire::encode(f);
    calls_encoded_.fetch_add(1, std::memory_order_relaxed);
    bytes_sent_.fetch_add(encoded.size(), std::memory_order_relaxed);
    wire::write_all(w.wfd, encoded.data(), encoded.size());
    return true;
  } catch (const std::exception& e) {
    std::function<void(RemoteResult)> cb;
    {
      std::lock_guard lock(mu_);
      cb = std::move(w.inflight_cb);
      w.inflight_cb = nullptr;
    }
    if (cb) cb(RemoteResult{false, {}, std::string("worker write failed: ") + e.what()});
    return false;
  }
}

void SubprocessPool::pump_queue() {
  // Called with mu_ NOT held: claim an idle worker under the lock, write the
  // frame outside it.
  for (;;) {
    std::shared_ptr<Worker> target;
    Pending p;
    {
      std::lock_guard lock(mu_);
      if (queue_.empty() || stopping_) return;
      for (auto& w : workers_) {
        if (!w->busy && !w->dead && w->handshaken) {
          target = w;
          break;
        }
      }
      if (!target) return;
      target->busy = true;
      p = std::move(queue_.front());
      queue_.pop_front();
    }
    if (!dispatch_to(*target, std::move(p))) {
      std::lock_guard lock(mu_);
      target->busy = false;
    }
  }
}

void SubprocessPool::fail_all_pending(const std::string& why) {
  std::deque<Pending> pending;
  {
    std::lock_guard lock(mu_);
    pending = std::move(queue_);
    queue_.clear();
  }
  for (auto& p : pending) p.cb(RemoteResult{false, {}, why});
}

void SubprocessPool::reader_main(std::shared_ptr<Worker> w) {
  for (;;) {
    std::optional<wire::Frame> f;
    bool protocol_broken = false;
    try {
      f = wire::read_frame(w->rfd);
    } catch (const std::exception&) {
      protocol_broken = true;
    }
    if (protocol_broken || !f) break;  // EOF or torn frame: worker is gone

    bytes_received_.fetch_add(4 + wire::kFrameHeaderBytes + f->payload.size(),
                              std::memory_order_relaxed);

    if (f->task_id == 0) {  // handshake
      bool bad = false;
      {
        std::lock_guard lock(mu_);
        if (f->payload.size() >= 12 &&
            wire::get_u32(std::span<const std::uint8_t>(f->payload).subspan(0, 4)) ==
                wire::kProtocolVersion &&
            wire::get_u64(std::span<const std::uint8_t>(f->payload).subspan(4, 8)) ==
                FunctionRegistry::global().digest()) {
          w->handshaken = true;
        } else {
          w->handshake_error = "registry digest mismatch in worker handshake";
          bad = true;
        }
      }
      cv_.notify_all();
      if (bad) break;
      pump_queue();
      continue;
    }

    std::function<void(RemoteResult)> cb;
    {
      std::lock_guard lock(mu_);
      if (!w->busy || f->task_id != w->inflight_task) continue;  // stale frame
      cb = std::move(w->inflight_cb);
      w->inflight_cb = nullptr;
      w->busy = false;
    }
    results_decoded_.fetch_add(1, std::memory_order_relaxed);
    RemoteResult r;
    if (f->opcode == wire::Opcode::result) {
      r = RemoteResult{true, std::move(f->payload), {}};
    } else {
      r = RemoteResult{false, {}, std::string(f->payload.begin(), f->payload.end())};
    }
    if (cb) cb(std::move(r));
    pump_queue();
  }

  // Exit path: worker died or was shut down.
  std::function<void(RemoteResult)> orphan_cb;
  bool respawn = false;
  {
    std::lock_guard lock(mu_);
    w->dead = true;
    close(w->rfd);
    close(w->wfd);
    w->rfd = w->wfd = -1;
    orphan_cb = std::move(w->inflight_cb);
    w->inflight_cb = nullptr;
    if (!stopping_) {
      int status = 0;
      waitpid(w->pid, &status, 0);
      w->pid = -1;
      respawn = true;
    }
  }
  if (orphan_cb) orphan_cb(RemoteResult{false, {}, "worker process exited mid-task"});
  if (respawn) {
    std::lock_guard lock(mu_);
    if (!stopping_) {
      try {
        spawn_locked(*w);
        workers_respawned_.fetch_add(1, std::memory_order_relaxed);
        ++live_readers_;
        std::thread(&SubprocessPool::reader_main, this, w).detach();
      } catch (const std::exception&) {
        // spawn failed; leave the slot dead
      }
    }
  }
  {
    std::lock_guard lock(mu_);
    --live_readers_;
  }
  cv_.notify_all();
}

ShutdownStatus SubprocessPool::shutdown(std::chrono::milliseconds deadline) {
  ShutdownStatus status;
  std::vector<std::shared_ptr<Worker>> workers;
  {
    std::unique_lock lock(mu_);
    bool already = stopping_ || !started_;
    stopping_ = true;
    if (already) {
      started_ = false;
    } else {
      workers = workers_;
    }
  }
  fail_all_pending("subprocess pool shut down");
  if (workers.empty()) return status;

  for (auto& w : workers) {
    std::lock_guard lock(mu_);
    if (w->dead || w->wfd < 0) continue;
    try {
      wire::write_frame(w->wfd, wire::Frame{wire::Opcode::shutdown, 0, {}});
    } catch (const std::exception&) {
      // already gone
    }
  }

  auto deadline_at = std::chrono::steady_clock::now() + deadline;
  for (auto& w : workers) {
    pid_t pid;
    {
      std::lock_guard lock(mu_);
      pid = w->pid;
    }
    if (pid < 0) continue;
    bool exited = false;
    for (;;) {
      int st = 0;
      pid_t r = waitpid(pid, &st, WNOHANG);
      if (r == pid || r < 0) {
        exited = r == pid;
        break;
      }
      if (std::chrono::steady_clock::now() >= deadline_at) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    if (exited) {
      ++status.exited;
    } else {
      kill(pid, SIGKILL);
      waitpid(pid, nullptr, 0);
      ++status.killed;
    }
    std::lock_guard lock(mu_);
    w->pid = -1;
  }

  // Readers see EOF once their worker is gone; wait for them to drain.
  {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, std::chrono::seconds(5), [&] { return live_readers_ == 0; });
    started_ = false;
  }
  return status;
}

Bytes SubprocessPool::call(const std::string& func, Bytes payload) {
  struct Sync {
    std::mutex m;
    std::condition_variable c;
    bool done = false;
    RemoteResult r;
  };
  auto s = std::make_shared<Sync>();
  submit(func, std::move(payload), [s](RemoteResult r) {
    std::lock_guard lock(s->m);
    s->r = std::move(r);
    s->done = true;
    s->c.notify_all();
  });
  std::unique_lock lock(s->m);
  s->c.wait(lock, [&] { return s->done; });
  if (!s->r.ok) throw Error("remote call '" + func + "' failed: " + s->r.error);
  return std::move(s->r.value);
}

IpcCounters SubprocessPool::counters() const {
  IpcCounters c;
  c.calls_encoded = calls_encoded_.load(std::memory_order_relaxed);
  c.results_decoded = results_decoded_.load(std::memory_order_relaxed);
  c.bytes_sent = bytes_sent_.load(std::memory_order_relaxed);
  c.bytes_received = bytes_received_.load(std::memory_order_relaxed);
  c.workers_respawned = workers_respawned_.load(std::memory_order_relaxed);
  return c;
}

}  // namespace spindle
