#include "spindle/pipeline.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <variant>

#include "spindle/subprocess.hpp"
#include "spindle/trace.hpp"

namespace spindle {

namespace {

using Clock = std::chrono::steady_clock;
using TimePoint = Clock::time_point;

std::uint64_t us_between(TimePoint a, TimePoint b) {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(b - a).count());
}

struct Envelope {
  Item payload;
  std::uint64_t weight = 1;  // source items represented
  bool eos = false;
};

// Control-thread-written stage counters readable from any thread. A seqlock
// keeps cross-counter invariants (dequeued = succeeded + failed + abandoned +
// in_flight) exact in every snapshot; fields are relaxed atomics so readers
// never block the writer.
struct StatsBlock {
  std::atomic<std::uint64_t> version{0};
  std::atomic<std::uint64_t> dequeued{0}, succeeded{0}, failed{0}, abandoned{0};
  std::atomic<std::uint64_t> failed_items{0};
  std::atomic<std::int64_t> in_flight{0};
  std::atomic<std::uint64_t> dur_count{0}, dur_sum{0}, dur_min{0}, dur_max{0};
  std::array<std::atomic<std::uint64_t>, latency_buckets::kCount> hist{};

  template <class F>
  void write(F&& mutate) {
    version.fetch_add(1, std::memory_order_release);
    mutate();
    version.fetch_add(1, std::memory_order_release);
  }

  void record_duration(std::uint64_t us) {
    dur_count.fetch_add(1, std::memory_order_relaxed);
    dur_sum.fetch_add(us, std::memory_order_relaxed);
    std::uint64_t cnt = dur_count.load(std::memory_order_relaxed);
    if (cnt == 1 || us < dur_min.load(std::memory_order_relaxed)) {
      dur_min.store(us, std::memory_order_relaxed);
    }
    if (us > dur_max.load(std::memory_order_relaxed)) {
      dur_max.store(us, std::memory_order_relaxed);
    }
    hist[static_cast<std::size_t>(latency_buckets::bucket_of(us))].fetch_add(
        1, std::memory_order_relaxed);
  }
};

struct OccStats {
  std::atomic<std::uint64_t> samples{0}, sum{0}, max{0};

  void record(std::uint64_t len) {
    samples.fetch_add(1, std::memory_order_relaxed);
    sum.fetch_add(len, std::memory_order_relaxed);
    std::uint64_t m = max.load(std::memory_order_relaxed);
    while (len > m && !max.compare_exchange_weak(m, len, std::memory_order_relaxed)) {
    }
  }
};

struct TaskDoneEvent {
  std::size_t stage = 0;
  std::uint64_t seq = 0;
  bool ok = false;
  Item value;
  std::string error;
  std::uint64_t dur_us = 0;
};

struct TaskDeferredEvent {
  std::size_t stage = 0;
  std::uint64_t seq = 0;
  Deferred deferred;
};

struct SinkPoppedEvent {};

struct StopEvent {
  std::chrono::milliseconds deadline{0};
};

using Event = std::variant<TaskDoneEvent, TaskDeferredEvent, SinkPoppedEvent, StopEvent>;

// MPSC event queue feeding the control thread. Closing drops later posts so
// late completions from detached workers are safe no-ops.
struct Inbox {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Event> q;
  bool closed = false;

  void post(Event e) {
    {
      std::lock_guard lock(mu);
      if (closed) return;
      q.push_back(std::move(e));
    }
    cv.notify_one();
  }

  void close() {
    std::lock_guard lock(mu);
    closed = true;
  }

  void wait_drain(std::optional<TimePoint> deadline, std::deque<Event>& out) {
    std::unique_lock lock(mu);
    if (q.empty()) {
      if (deadline) {
        cv.wait_until(lock, *deadline, [&] { return !q.empty(); });
      } else {
        cv.wait(lock, [&] { return !q.empty(); });
      }
    }
    out.swap(q);
  }
};

// Bounded buffer between the pipeline and the consumer. The control thread
// pushes (a slot is always reserved beforehand); the consumer pops.
class SinkBuffer {
 public:
  enum class PopStatus { item, timed_out, closed_error, closed_stopped };
  struct PopResult {
    PopStatus status = PopStatus::timed_out;
    Envelope env;
    std::string error_stage;
    std::string error;
  };

  explicit SinkBuffer(std::size_t capacity) : capacity_(capacity) {}

  void push(Envelope env) {
    {
      std::lock_guard lock(mu_);
      q_.push_back(std::move(env));
      occ.record(q_.size());
    }
    cv_.notify_one();
  }

  PopResult pop(std::optional<std::chrono::milliseconds> timeout) {
    std::unique_lock lock(mu_);
    auto ready = [&] { return !q_.empty() || closed_; };
    if (timeout) {
      if (!cv_.wait_for(lock, *timeout, ready)) return {};
    } else {
      cv_.wait(lock, ready);
    }
    if (closed_ && !error_.empty()) return {PopStatus::closed_error, {}, error_stage_, error_};
    if (q_.empty()) return {PopStatus::closed_stopped, {}, {}, {}};
    PopResult r;
    r.status = PopStatus::item;
    r.env = std::move(q_.front());
    q_.pop_front();
    occ.record(q_.size());
    return r;
  }

  void close_stopped() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  void close_error(std::string stage, std::string msg) {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
      error_stage_ = std::move(stage);
      error_ = std::move(msg);
    }
    cv_.notify_all();
  }

  std::vector<Envelope> drain() {
    std::lock_guard lock(mu_);
    std::vector<Envelope> out;
    out.reserve(q_.size());
    for (auto& e : q_) out.push_back(std::move(e));
    q_.clear();
    return out;
  }

  std::size_t capacity() const { return capacity_; }

  OccStats occ;

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Envelope> q_;
  bool closed_ = false;
  std::string error_stage_;
  std::string error_;
};

struct InflightEntry {
  std::uint64_t weight = 1;
  Deferred deferred;  // engaged once the task reported a deferred completion
};

enum class StageKind { map, aggregate };

struct StageRt {
  // immutable after build
  std::size_t index = 0;
  bool is_last = false;
  std::string name;
  StageKind kind = StageKind::map;
  std::shared_ptr<StageFn> fn;  // shared so task closures outlive teardown
  bool is_remote = false;
  std::string remote_func;
  int concurrency = 1;
  int batch_size = 0;
  bool flush_remainder = true;
  std::size_t out_capacity = 1;
  ErrorPolicy error_policy = ErrorPolicy::skip_and_record;
  std::optional<double> abort_ratio;
  ExecutorBinding binding;
  ThreadPool* pool = nullptr;
  std::unique_ptr<ThreadPool> owned_pool;
  std::unique_ptr<SubprocessPool> owned_spool;

  // control-thread state
  std::deque<Envelope> out_queue;  // unused for the last stage (sink instead)
  bool input_eos = false;
  bool eos_emitted = false;
  std::uint64_t next_in_seq = 0;
  std::uint64_t next_place_seq = 0;
  std::map<std::uint64_t, InflightEntry> inflight;
  std::map<std::uint64_t, std::optional<Envelope>> parked;  // FIFO reorder buffer
  std::vector<Item> agg_acc;
  std::uint64_t agg_weight = 0;
  bool agg_reserved = false;

  // failure window (last 100 completions)
  std::array<std::uint8_t, 100> window{};
  int window_len = 0;
  int window_pos = 0;
  int window_fails = 0;

  // telemetry
  StatsBlock stats;
  OccStats occ;
  std::atomic<std::uint64_t> blocked_total_us{0};
  std::atomic<std::uint64_t> blocked_since_us{0};  // 0 = not blocked; else epoch-us + 1
  bool blocked_flag = false;

  std::size_t reserved() const {
    if (kind == StageKind::aggregate) return agg_reserved ? 1 : 0;
    return inflight.size() + parked.size();
  }
};

enum class Phase { running, draining };

}  // namespace

// ---------------------------------------------------------------------------

struct Pipeline::Impl {
  // configuration
  Source source;
  std::vector<std::unique_ptr<StageRt>> stages;
  std::size_t sink_capacity = 1;
  Ordering ordering = Ordering::completion_order;
  int worker_count = 1;

  std::unique_ptr<ThreadPool> shared_pool;
  std::shared_ptr<Inbox> inbox = std::make_shared<Inbox>();
  std::unique_ptr<SinkBuffer> sink;

  // lifecycle (consumer side)
  std::mutex lifecycle_mu;
  bool started = false;
  bool stop_finished = false;
  StopReport report;
  std::thread control;
  std::atomic<PipelineState> state{PipelineState::built};
  std::atomic<std::thread::id> control_tid{};
  std::atomic<bool> eos_returned{false};

  // control-thread state
  Phase phase = Phase::running;
  TimePoint drain_deadline_at{};
  bool source_done = false;
  bool sink_eos_pushed = false;
  std::size_t sink_len_estimate = 0;
  std::optional<std::pair<std::string, std::string>> pipeline_error;

  // shared counters
  std::atomic<std::uint64_t> source_pulled{0};
  std::atomic<std::uint64_t> sink_emitted{0};
  std::atomic<std::uint64_t> emitted_items{0};
  std::atomic<std::uint64_t> failed_items{0};
  std::atomic<std::uint64_t> abandoned_items{0};
  std::atomic<std::uint64_t> remainder_dropped{0};
  std::atomic<std::uint64_t> ttfb_us{0};
  std::atomic<std::uint64_t> wall_frozen_us{0};
  std::atomic<bool> drain_hit{false};
  TimePoint start_time{};

  // --- control thread -------------------------------------------------

  void control_main();
  void handle(Event e);
  void on_task_done(TaskDoneEvent e);
  void schedule();
  bool advance_map(StageRt& st);
  bool advance_aggregate(StageRt& st);
  bool advance_passthrough();
  bool try_emit_eos(StageRt& st);
  void admit(StageRt& st, Envelope env);
  void dispatch(StageRt& st, std::uint64_t seq, Item payload);
  void place_output(StageRt& st, Envelope env);
  void park_and_place(StageRt& st, std::uint64_t seq, std::optional<Envelope> env);
  void emit_batch(StageRt& st);
  void push_sink(Envelope env);
  std::optional<Envelope> take_input(StageRt& st);
  bool input_maybe_available(const StageRt& st) const;
  std::size_t out_len(const StageRt& st) const;
  void note_completion(StageRt& st, bool ok, const std::string& error);
  void abort_pipeline(const std::string& stage, const std::string& error);
  void enter_draining(std::chrono::milliseconds deadline);
  std::size_t total_running() const;
  void update_blocked_flags();
  void finalize(bool deadline_hit);

  std::uint64_t epoch_us() const { return us_between(start_time, Clock::now()); }
};

void Pipeline::Impl::control_main() {
  control_tid.store(std::this_thread::get_id());
  try {
    schedule();
    for (;;) {
      if (phase == Phase::draining) {
        if (total_running() == 0) {
          finalize(false);
          return;
        }
        if (Clock::now() >= drain_deadline_at) {
          finalize(true);
          return;
        }
      }
      std::deque<Event> events;
      std::optional<TimePoint> dl;
      if (phase == Phase::draining) dl = drain_deadline_at;
      inbox->wait_drain(dl, events);
      for (auto& e : events) handle(std::move(e));
      if (phase == Phase::running) schedule();
    }
  } catch (const std::exception& e) {
    if (!pipeline_error) pipeline_error = {std::string("control"), std::string(e.what())};
    sink->close_error(pipeline_error->first, pipeline_error->second);
    phase = Phase::draining;
    finalize(false);
  }
}

void Pipeline::Impl::handle(Event e) {
  if (auto* td = std::get_if<TaskDoneEvent>(&e)) {
    on_task_done(std::move(*td));
  } else if (auto* tde = std::get_if<TaskDeferredEvent>(&e)) {
    auto& st = *stages[tde->stage];
    auto it = st.inflight.find(tde->seq);
    if (it != st.inflight.end()) {
      it->second.deferred = std::move(tde->deferred);
    } else if (tde->deferred.valid()) {
      tde->deferred.abandon();
    }
  } else if (std::get_if<SinkPoppedEvent>(&e)) {
    if (sink_len_estimate > 0) --sink_len_estimate;
  } else if (auto* se = std::get_if<StopEvent>(&e)) {
    auto at = Clock::now() + se->deadline;
    if (phase == Phase::draining) {
      drain_deadline_at = std::min(drain_deadline_at, at);
    } else {
      enter_draining(se->deadline);
    }
  }
}

void Pipeline::Impl::on_task_done(TaskDoneEvent e) {
  auto& st = *stages[e.stage];
  auto it = st.inflight.find(e.seq);
  if (it == st.inflight.end()) return;  // already abandoned
  std::uint64_t weight = it->second.weight;
  st.inflight.erase(it);

  st.stats.write([&] {
    st.stats.in_flight.fetch_sub(1, std::memory_order_relaxed);
    if (e.ok) {
      st.stats.succeeded.fetch_add(1, std::memory_order_relaxed);
    } else {
      st.stats.failed.fetch_add(1, std::memory_order_relaxed);
      if (phase == Phase::running) {
        st.stats.failed_items.fetch_add(weight, std::memory_order_relaxed);
      }
    }
    st.stats.record_duration(e.dur_us);
  });
  trace::stage_event(st.name, e.ok ? "ok" : "fail", e.seq, e.dur_us);

  if (phase == Phase::draining) {
    // Result arrived while stopping: never placed, counted as abandoned.
    abandoned_items.fetch_add(weight, std::memory_order_relaxed);
    return;
  }

  if (e.ok) {
    Envelope env;
    env.payload = std::move(e.value);
    env.weight = weight;
    if (ordering == Ordering::fifo) {
      park_and_place(st, e.seq, std::move(env));
    } else {
      place_output(st, std::move(env));
    }
  } else {
    failed_items.fetch_add(weight, std::memory_order_relaxed);
    if (ordering == Ordering::fifo) {
      park_and_place(st, e.seq, std::nullopt);
    }
  }
  note_completion(st, e.ok, e.error);
}

void Pipeline::Impl::schedule() {
  bool progress = true;
  while (progress && phase == Phase::running) {
    progress = false;
    if (stages.empty()) {
      progress |= advance_passthrough();
    } else {
      for (auto& st : stages) {
        progress |= st->kind == StageKind::aggregate ? advance_aggregate(*st) : advance_map(*st);
      }
    }
  }
  update_blocked_flags();
}

std::size_t Pipeline::Impl::out_len(const StageRt& st) const {
  return st.is_last ? sink_len_estimate : st.out_queue.size();
}

bool Pipeline::Impl::input_maybe_available(const StageRt& st) const {
  if (st.index == 0) return !source_done;
  return !stages[st.index - 1]->out_queue.empty();
}

std::optional<Envelope> Pipeline::Impl::take_input(StageRt& st) {
  if (st.index == 0) {
    if (source_done) return std::nullopt;
    auto v = source();  // demand-driven pull; may throw
    if (!v) {
      source_done = true;
      Envelope eos;
      eos.eos = true;
      eos.weight = 0;
      return eos;
    }
    source_pulled.fetch_add(1, std::memory_order_relaxed);
    Envelope env;
    env.payload = std::move(*v);
    return env;
  }
  auto& up = *stages[st.index - 1];
  if (up.out_queue.empty()) return std::nullopt;
  Envelope env = std::move(up.out_queue.front());
  up.out_queue.pop_front();
  up.occ.record(up.out_queue.size());
  return env;
}

bool Pipeline::Impl::advance_map(StageRt& st) {
  bool progress = false;
  for (;;) {
    if (st.input_eos) break;
    if (static_cast<int>(st.inflight.size()) >= st.concurrency) break;
    if (out_len(st) + st.reserved() >= st.out_capacity) break;  // demand-driven admission
    auto env = take_input(st);
    if (!env) break;
    if (env->eos) {
      st.input_eos = true;
      progress = true;
      break;
    }
    admit(st, std::move(*env));
    progress = true;
  }
  progress |= try_emit_eos(st);
  return progress;
}

bool Pipeline::Impl::advance_aggregate(StageRt& st) {
  bool progress = false;
  for (;;) {
    if (st.input_eos) break;
    if (!st.agg_reserved) {
      if (out_len(st) >= st.out_capacity) break;  // no slot to start a batch into
      st.agg_reserved = true;
    }
    auto env = take_input(st);
    if (!env) break;
    if (env->eos) {
      st.input_eos = true;
      progress = true;
    } else {
      st.stats.write([&] {
        st.stats.dequeued.fetch_add(1, std::memory_order_relaxed);
        st.stats.succeeded.fetch_add(1, std::memory_order_relaxed);
      });
      st.agg_weight += env->weight;
      st.agg_acc.push_back(std::move(env->payload));
      progress = true;
      if (static_cast<int>(st.agg_acc.size()) >= st.batch_size) emit_batch(st);
      continue;
    }
    break;
  }
  if (st.input_eos && !st.agg_acc.empty()) {
    if (st.flush_remainder) {
      emit_batch(st);  // reservation held since the batch began filling
    } else {
      remainder_dropped.fetch_add(st.agg_weight, std::memory_order_relaxed);
      st.agg_acc.clear();
      st.agg_weight = 0;
      st.agg_reserved = false;
    }
    progress = true;
  }
  if (st.input_eos && st.agg_acc.empty() && st.agg_reserved) st.agg_reserved = false;
  progress |= try_emit_eos(st);
  return progress;
}

bool Pipeline::Impl::try_emit_eos(StageRt& st) {
  if (!st.input_eos || st.eos_emitted) return false;
  if (!st.inflight.empty() || !st.parked.empty() || !st.agg_acc.empty()) return false;
  if (out_len(st) + st.reserved() >= st.out_capacity) return false;
  Envelope eos;
  eos.eos = true;
  eos.weight = 0;
  st.eos_emitted = true;
  trace::stage_event(st.name, "eos", st.next_in_seq, 0);
  place_output(st, std::move(eos));
  return true;
}

bool Pipeline::Impl::advance_passthrough() {
  bool progress = false;
  while (!source_done && sink_len_estimate < sink_capacity) {
    auto v = source();
    if (!v) {
      source_done = true;
      break;
    }
    source_pulled.fetch_add(1, std::memory_order_relaxed);
    Envelope env;
    env.payload = std::move(*v);
    push_sink(std::move(env));
    progress = true;
  }
  if (source_done && !sink_eos_pushed && sink_len_estimate < sink_capacity) {
    Envelope eos;
    eos.eos = true;
    eos.weight = 0;
    sink_eos_pushed = true;
    push_sink(std::move(eos));
    progress = true;
  }
  return progress;
}

void Pipeline::Impl::admit(StageRt& st, Envelope env) {
  std::uint64_t seq = st.next_in_seq++;
  st.inflight.emplace(seq, InflightEntry{env.weight, Deferred{}});
  st.stats.write([&] {
    st.stats.dequeued.fetch_add(1, std::memory_order_relaxed);
    st.stats.in_flight.fetch_add(1, std::memory_order_relaxed);
  });
  dispatch(st, seq, std::move(env.payload));
}

void Pipeline::Impl::dispatch(StageRt& st, std::uint64_t seq, Item payload) {
  auto box = inbox;
  std::size_t sid = st.index;
  if (st.is_remote) {
    if (!payload.holds<Bytes>()) {
      box->post(TaskDoneEvent{sid, seq, false, {}, "remote stage input must hold Bytes", 0});
      return;
    }
    Bytes arg = payload.take<Bytes>();
    auto t0 = Clock::now();
    if (trace::enabled()) trace::stage_event(st.name, "start", seq, 0);
    st.owned_spool->submit(st.remote_func, std::move(arg), [box, sid, seq, t0](RemoteResult r) {
      std::uint64_t dur = us_between(t0, Clock::now());
      if (r.ok) {
        box->post(TaskDoneEvent{sid, seq, true, Item::of(std::move(r.value)), {}, dur});
      } else {
        box->post(TaskDoneEvent{sid, seq, false, {}, std::move(r.error), dur});
      }
    });
    return;
  }

  std::string name = trace::enabled() ? st.name : std::string();
  st.pool->submit(Task([box, sid, seq, fn = st.fn, name = std::move(name),
                        payload = std::move(payload)]() mutable {
    if (!name.empty()) trace::stage_event(name, "start", seq, 0);
    auto t0 = Clock::now();
    try {
      StageOutcome out = (*fn)(std::move(payload));
      if (out.is_deferred()) {
        Deferred d = out.deferred();
        box->post(TaskDeferredEvent{sid, seq, d});
        d.on_settle([box, sid, seq, t0](bool ok, Item&& v, const std::string& err) {
          box->post(TaskDoneEvent{sid, seq, ok, std::move(v), err, us_between(t0, Clock::now())});
        });
      } else {
        box->post(
            TaskDoneEvent{sid, seq, true, out.take_item(), {}, us_between(t0, Clock::now())});
      }
    } catch (const std::exception& e) {
      box->post(TaskDoneEvent{sid, seq, false, {}, e.what(), us_between(t0, Clock::now())});
    } catch (...) {
      box->post(TaskDoneEvent{sid, seq, false, {}, "unknown error", us_between(t0, Clock::now())});
    }
  }));
}

void Pipeline::Impl::place_output(StageRt& st, Envelope env) {
  if (st.is_last) {
    push_sink(std::move(env));
  } else {
    st.out_queue.push_back(std::move(env));
    st.occ.record(st.out_queue.size());
  }
}

void Pipeline::Impl::park_and_place(StageRt& st, std::uint64_t seq, std::optional<Envelope> env) {
  st.parked.emplace(seq, std::move(env));
  while (!st.parked.empty() && st.parked.begin()->first == st.next_place_seq) {
    auto node = st.parked.extract(st.parked.begin());
    if (node.mapped().has_value()) place_output(st, std::move(*node.mapped()));
    ++st.next_place_seq;
  }
}

void Pipeline::Impl::emit_batch(StageRt& st) {
  Envelope env;
  env.payload = Item::of(std::move(st.agg_acc));
  env.weight = st.agg_weight;
  st.agg_acc.clear();
  st.agg_weight = 0;
  st.agg_reserved = false;
  place_output(st, std::move(env));
}

void Pipeline::Impl::push_sink(Envelope env) {
  ++sink_len_estimate;
  if (!env.eos && ttfb_us.load(std::memory_order_relaxed) == 0) {
    ttfb_us.store(std::max<std::uint64_t>(1, epoch_us()), std::memory_order_relaxed);
  }
  sink->push(std::move(env));
}

void Pipeline::Impl::note_completion(StageRt& st, bool ok, const std::string& error) {
  if (!ok && st.error_policy == ErrorPolicy::fail_fast) {
    abort_pipeline(st.name, error);
    return;
  }
  if (!st.abort_ratio) return;
  std::uint8_t fresh = ok ? 0 : 1;
  if (st.window_len < static_cast<int>(st.window.size())) {
    st.window[static_cast<std::size_t>(st.window_pos)] = fresh;
    st.window_fails += fresh;
    ++st.window_len;
  } else {
    st.window_fails += fresh - st.window[static_cast<std::size_t>(st.window_pos)];
    st.window[static_cast<std::size_t>(st.window_pos)] = fresh;
  }
  st.window_pos = (st.window_pos + 1) % static_cast<int>(st.window.size());
  if (st.window_len == static_cast<int>(st.window.size())) {
    double ratio = st.window_fails / static_cast<double>(st.window.size());
    if (ratio > *st.abort_ratio) {
      abort_pipeline(st.name, "failure ratio " + std::to_string(ratio) +
                                  " exceeded abort threshold over the last 100 completions");
    }
  }
}

void Pipeline::Impl::abort_pipeline(const std::string& stage, const std::string& error) {
  if (phase != Phase::running) return;
  pipeline_error = {stage, error};
  sink->close_error(stage, error);
  enter_draining(Pipeline::kDefaultDrainDeadline);
}

void Pipeline::Impl::enter_draining(std::chrono::milliseconds deadline) {
  phase = Phase::draining;
  drain_deadline_at = Clock::now() + deadline;
  state.store(PipelineState::draining);
}

std::size_t Pipeline::Impl::total_running() const {
  std::size_t n = 0;
  for (const auto& st : stages) n += st->inflight.size();
  return n;
}

void Pipeline::Impl::update_blocked_flags() {
  for (auto& st : stages) {
    bool wants_slot;
    if (st->kind == StageKind::aggregate) {
      wants_slot = !st->input_eos && !st->agg_reserved && input_maybe_available(*st);
    } else {
      wants_slot = !st->input_eos && static_cast<int>(st->inflight.size()) < st->concurrency &&
                   input_maybe_available(*st);
    }
    bool blocked = wants_slot && out_len(*st) + st->reserved() >= st->out_capacity;
    if (blocked && !st->blocked_flag) {
      st->blocked_flag = true;
      st->blocked_since_us.store(epoch_us() + 1, std::memory_order_relaxed);
    } else if (!blocked && st->blocked_flag) {
      st->blocked_flag = false;
      std::uint64_t since = st->blocked_since_us.exchange(0, std::memory_order_relaxed);
      if (since > 0) {
        st->blocked_total_us.fetch_add(epoch_us() + 1 - since, std::memory_order_relaxed);
      }
    }
  }
}

void Pipeline::Impl::finalize(bool deadline_hit) {
  drain_hit.store(deadline_hit);

  for (auto& stp : stages) {
    auto& st = *stp;
    // straggler tasks: abandon deferred completions, forget sync ones
    for (auto& [seq, entry] : st.inflight) {
      if (entry.deferred.valid()) entry.deferred.abandon();
      abandoned_items.fetch_add(entry.weight, std::memory_order_relaxed);
      st.stats.write([&] {
        st.stats.in_flight.fetch_sub(1, std::memory_order_relaxed);
        st.stats.abandoned.fetch_add(1, std::memory_order_relaxed);
      });
    }
    st.inflight.clear();
    for (auto& [seq, env] : st.parked) {
      if (env.has_value()) abandoned_items.fetch_add(env->weight, std::memory_order_relaxed);
    }
    st.parked.clear();
    for (auto& env : st.out_queue) {
      abandoned_items.fetch_add(env.weight, std::memory_order_relaxed);
    }
    st.out_queue.clear();
    if (!st.agg_acc.empty()) {
      remainder_dropped.fetch_add(st.agg_weight, std::memory_order_relaxed);
      st.agg_acc.clear();
      st.agg_weight = 0;
    }
    if (st.blocked_flag) {
      st.blocked_flag = false;
      std::uint64_t since = st.blocked_since_us.exchange(0, std::memory_order_relaxed);
      if (since > 0) {
        st.blocked_total_us.fetch_add(epoch_us() + 1 - since, std::memory_order_relaxed);
      }
    }
  }

  for (auto& env : sink->drain()) {
    if (!env.eos) abandoned_items.fetch_add(env.weight, std::memory_order_relaxed);
  }
  if (pipeline_error) {
    sink->close_error(pipeline_error->first, pipeline_error->second);
  } else {
    sink->close_stopped();
  }

  inbox->close();

  // Workers should be idle now; anything still stuck is detached, and its
  // eventual completion lands in the closed inbox.
  auto grace = deadline_hit ? std::chrono::milliseconds(200) : std::chrono::milliseconds(5000);
  shared_pool->shutdown(grace);
  for (auto& st : stages) {
    if (st->owned_pool) st->owned_pool->shutdown(grace);
    if (st->owned_spool) st->owned_spool->shutdown(std::chrono::milliseconds(500));
  }

  wall_frozen_us.store(std::max<std::uint64_t>(1, epoch_us()), std::memory_order_relaxed);
  state.store(PipelineState::stopped);
}

// ---------------------------------------------------------------------------
// Pipeline public surface

Pipeline::Pipeline() : impl_(std::make_unique<Impl>()) {}

Pipeline::~Pipeline() { stop(); }

void Pipeline::start() {
  auto& im = *impl_;
  std::lock_guard lock(im.lifecycle_mu);
  if (im.stop_finished) throw Error("start() on a stopped pipeline");
  if (im.started) return;
  im.start_time = Clock::now();
  im.shared_pool->start();
  for (auto& st : im.stages) {
    if (st->owned_pool) st->owned_pool->start();
    if (st->owned_spool) st->owned_spool->start();
  }
  im.control = std::thread([imp = impl_.get()] { imp->control_main(); });
  im.state.store(PipelineState::running);
  im.started = true;
}

Next Pipeline::next(std::optional<std::chrono::milliseconds> timeout) {
  auto& im = *impl_;
  start();
  if (im.eos_returned.load()) throw Error("next() after EndOfStream");
  if (im.stop_finished && im.state.load() == PipelineState::stopped) {
    throw Error("next() on a stopped pipeline");
  }

  auto r = im.sink->pop(timeout);
  switch (r.status) {
    case SinkBuffer::PopStatus::item:
      if (r.env.eos) {
        im.eos_returned.store(true);
        im.inbox->post(SinkPoppedEvent{});
        Next n;
        n.status = Next::Status::end_of_stream;
        return n;
      } else {
        im.sink_emitted.fetch_add(1, std::memory_order_relaxed);
        im.emitted_items.fetch_add(r.env.weight, std::memory_order_relaxed);
        im.inbox->post(SinkPoppedEvent{});
        Next n;
        n.status = Next::Status::item;
        n.value = std::move(r.env.payload);
        return n;
      }
    case SinkBuffer::PopStatus::timed_out: {
      Next n;
      n.status = Next::Status::timed_out;
      return n;
    }
    case SinkBuffer::PopStatus::closed_error:
      throw PipelineError(r.error_stage, r.error);
    case SinkBuffer::PopStatus::closed_stopped:
    default:
      throw Error("pipeline stopped");
  }
}

StopReport Pipeline::stop(std::chrono::milliseconds drain_deadline) {
  auto& im = *impl_;
  std::lock_guard lock(im.lifecycle_mu);
  if (im.stop_finished) return im.report;
  if (!im.started) {
    im.state.store(PipelineState::stopped);
    im.stop_finished = true;
    im.report = StopReport{};
    return im.report;
  }
  im.inbox->post(StopEvent{drain_deadline});
  if (im.control.joinable()) im.control.join();
  im.report.items_emitted = im.emitted_items.load();
  im.report.items_failed = im.failed_items.load();
  im.report.items_abandoned = im.abandoned_items.load();
  im.report.items_dropped_remainder = im.remainder_dropped.load();
  im.report.drain_deadline_hit = im.drain_hit.load();
  im.stop_finished = true;
  return im.report;
}

PipelineState Pipeline::state() const { return impl_->state.load(); }

StopReport Pipeline::stop_report() const {
  std::lock_guard lock(impl_->lifecycle_mu);
  return impl_->report;
}

std::thread::id Pipeline::control_thread_id() const { return impl_->control_tid.load(); }

bool Pipeline::claim_scope() { return !scope_claimed_.exchange(true); }

void Pipeline::release_scope() { scope_claimed_.store(false); }

PipelineStatsSnapshot Pipeline::snapshot() const {
  auto& im = *impl_;
  PipelineStatsSnapshot snap;

  std::uint64_t now_us = 0;
  bool started = im.state.load() != PipelineState::built;
  if (started) now_us = im.epoch_us();

  for (const auto& stp : im.stages) {
    const auto& st = *stp;
    StageStatsSnapshot s;
    s.name = st.name;
    s.kind = st.kind == StageKind::aggregate ? "aggregate" : "map";
    s.concurrency = st.concurrency;

    std::array<std::uint64_t, latency_buckets::kCount> hist{};
    for (;;) {
      std::uint64_t v1 = st.stats.version.load(std::memory_order_acquire);
      if (v1 & 1) {
        std::this_thread::yield();
        continue;
      }
      s.dequeued = st.stats.dequeued.load(std::memory_order_relaxed);
      s.succeeded = st.stats.succeeded.load(std::memory_order_relaxed);
      s.failed = st.stats.failed.load(std::memory_order_relaxed);
      s.abandoned = st.stats.abandoned.load(std::memory_order_relaxed);
      s.failed_items = st.stats.failed_items.load(std::memory_order_relaxed);
      s.in_flight = st.stats.in_flight.load(std::memory_order_relaxed);
      s.task_duration.count = st.stats.dur_count.load(std::memory_order_relaxed);
      s.task_duration.sum_us = st.stats.dur_sum.load(std::memory_order_relaxed);
      s.task_duration.min_us = st.stats.dur_min.load(std::memory_order_relaxed);
      s.task_duration.max_us = st.stats.dur_max.load(std::memory_order_relaxed);
      for (int b = 0; b < latency_buckets::kCount; ++b) {
        hist[static_cast<std::size_t>(b)] =
            st.stats.hist[static_cast<std::size_t>(b)].load(std::memory_order_relaxed);
      }
      std::atomic_thread_fence(std::memory_order_acquire);
      std::uint64_t v2 = st.stats.version.load(std::memory_order_acquire);
      if (v1 == v2) break;
    }
    s.task_duration.p50_us = latency_buckets::quantile_us(hist, 0.50);
    s.task_duration.p99_us = latency_buckets::quantile_us(hist, 0.99);

    if (st.is_last) {
      s.output_queue.samples = im.sink->occ.samples.load(std::memory_order_relaxed);
      s.output_queue.sum = im.sink->occ.sum.load(std::memory_order_relaxed);
      s.output_queue.max = im.sink->occ.max.load(std::memory_order_relaxed);
      s.output_queue.capacity = im.sink->capacity();
    } else {
      s.output_queue.samples = st.occ.samples.load(std::memory_order_relaxed);
      s.output_queue.sum = st.occ.sum.load(std::memory_order_relaxed);
      s.output_queue.max = st.occ.max.load(std::memory_order_relaxed);
      s.output_queue.capacity = st.out_capacity;
    }

    s.blocked_on_put_us = st.blocked_total_us.load(std::memory_order_relaxed);
    std::uint64_t since = st.blocked_since_us.load(std::memory_order_relaxed);
    if (since > 0 && now_us + 1 > since) s.blocked_on_put_us += now_us + 1 - since;

    snap.stages.push_back(std::move(s));
  }

  snap.source_pulled = im.source_pulled.load(std::memory_order_relaxed);
  snap.sink_emitted = im.sink_emitted.load(std::memory_order_relaxed);
  snap.emitted_items = im.emitted_items.load(std::memory_order_relaxed);
  snap.failed_items = im.failed_items.load(std::memory_order_relaxed);
  snap.abandoned_items = im.abandoned_items.load(std::memory_order_relaxed);
  snap.remainder_dropped_items = im.remainder_dropped.load(std::memory_order_relaxed);
  snap.ttfb_us = im.ttfb_us.load(std::memory_order_relaxed);

  std::uint64_t frozen = im.wall_frozen_us.load(std::memory_order_relaxed);
  snap.wall_time_us = frozen != 0 ? frozen : now_us;
  return snap;
}

// ---------------------------------------------------------------------------
// Builder

struct StageSpec {
  std::string name;
  StageKind kind = StageKind::map;
  StageFn fn;
  bool is_remote = false;
  std::string remote_func;
  StageOptions opts;
  int batch_size = 0;
  bool flush_remainder = true;
};

struct PipelineBuilder::Spec {
  Source source;
  bool has_source = false;
  std::vector<StageSpec> stages;
  int sink_capacity = 0;
  bool has_sink = false;
  Ordering ordering = Ordering::completion_order;
  bool used = false;
};

PipelineBuilder::PipelineBuilder() : spec_(std::make_unique<Spec>()) {}
PipelineBuilder::~PipelineBuilder() = default;
PipelineBuilder::PipelineBuilder(PipelineBuilder&&) noexcept = default;
PipelineBuilder& PipelineBuilder::operator=(PipelineBuilder&&) noexcept = default;

PipelineBuilder& PipelineBuilder::add_source(Source source) {
  if (spec_->has_source) throw ConfigError("source already set");
  if (!source) throw ConfigError("source must be callable");
  spec_->source = std::move(source);
  spec_->has_source = true;
  return *this;
}

namespace {

void validate_stage_options(const StageOptions& opts) {
  if (opts.concurrency < 1) throw ConfigError("stage concurrency must be >= 1");
  if (opts.queue_capacity == 0 || opts.queue_capacity < -1) {
    throw ConfigError("stage queue_capacity must be >= 1 (or -1 for default)");
  }
  if (opts.failure_abort_ratio &&
      (*opts.failure_abort_ratio <= 0.0 || *opts.failure_abort_ratio > 1.0)) {
    throw ConfigError("failure_abort_ratio must lie in (0, 1]");
  }
  if (opts.executor.kind != ExecutorBinding::Kind::shared_pool && opts.executor.size < 1) {
    throw ConfigError("executor pool size must be >= 1");
  }
}

}  // namespace

PipelineBuilder& PipelineBuilder::pipe(std::string name, StageFn fn, StageOptions opts) {
  if (!spec_->has_source) throw ConfigError("pipe() before add_source()");
  if (spec_->has_sink) throw ConfigError("pipe() after add_sink()");
  if (!fn) throw ConfigError("stage function must be callable");
  validate_stage_options(opts);
  if (opts.executor.kind == ExecutorBinding::Kind::subprocess_pool) {
    throw ConfigError("subprocess executor requires pipe_remote()");
  }
  StageSpec s;
  s.name = std::move(name);
  s.fn = std::move(fn);
  s.opts = std::move(opts);
  spec_->stages.push_back(std::move(s));
  return *this;
}

PipelineBuilder& PipelineBuilder::pipe_remote(std::string name, std::string func_name,
                                              StageOptions opts) {
  if (!spec_->has_source) throw ConfigError("pipe_remote() before add_source()");
  if (spec_->has_sink) throw ConfigError("pipe_remote() after add_sink()");
  validate_stage_options(opts);
  if (opts.executor.kind != ExecutorBinding::Kind::subprocess_pool) {
    opts.executor = ExecutorBinding::subprocess(std::max(1, opts.executor.size));
  }
  StageSpec s;
  s.name = std::move(name);
  s.is_remote = true;
  s.remote_func = std::move(func_name);
  s.opts = std::move(opts);
  spec_->stages.push_back(std::move(s));
  return *this;
}

PipelineBuilder& PipelineBuilder::aggregate(int batch_size, bool flush_remainder) {
  if (!spec_->has_source) throw ConfigError("aggregate() before add_source()");
  if (spec_->has_sink) throw ConfigError("aggregate() after add_sink()");
  if (batch_size < 1) throw ConfigError("aggregate batch_size must be >= 1");
  StageSpec s;
  s.name = "aggregate" + std::to_string(spec_->stages.size());
  s.kind = StageKind::aggregate;
  s.batch_size = batch_size;
  s.flush_remainder = flush_remainder;
  s.opts.concurrency = 1;
  s.opts.queue_capacity = 1;
  spec_->stages.push_back(std::move(s));
  return *this;
}

PipelineBuilder& PipelineBuilder::add_sink(int buffer_size) {
  if (!spec_->has_source) throw ConfigError("add_sink() before add_source()");
  if (spec_->has_sink) throw ConfigError("sink already set");
  if (buffer_size < 1) throw ConfigError("sink buffer_size must be >= 1");
  spec_->sink_capacity = buffer_size;
  spec_->has_sink = true;
  return *this;
}

PipelineBuilder& PipelineBuilder::ordering(Ordering mode) {
  spec_->ordering = mode;
  return *this;
}

std::unique_ptr<Pipeline> PipelineBuilder::build(int worker_count) {
  if (spec_->used) throw ConfigError("builder already used");
  if (!spec_->has_source) throw ConfigError("build() without a source");
  if (!spec_->has_sink) throw ConfigError("build() without a sink");
  if (worker_count < 1) throw ConfigError("worker_count must be >= 1");
  spec_->used = true;

  auto p = std::unique_ptr<Pipeline>(new Pipeline());
  auto& im = *p->impl_;
  im.source = std::move(spec_->source);
  im.sink_capacity = static_cast<std::size_t>(spec_->sink_capacity);
  im.ordering = spec_->ordering;
  im.worker_count = worker_count;
  im.shared_pool = std::make_unique<ThreadPool>(worker_count, "shared");
  im.sink = std::make_unique<SinkBuffer>(im.sink_capacity);

  for (std::size_t i = 0; i < spec_->stages.size(); ++i) {
    auto& ss = spec_->stages[i];
    auto st = std::make_unique<StageRt>();
    st->index = i;
    st->is_last = i + 1 == spec_->stages.size();
    st->name = std::move(ss.name);
    st->kind = ss.kind;
    st->is_remote = ss.is_remote;
    st->remote_func = std::move(ss.remote_func);
    st->concurrency = ss.opts.concurrency;
    st->batch_size = ss.batch_size;
    st->flush_remainder = ss.flush_remainder;
    st->error_policy = ss.opts.error_policy;
    st->abort_ratio = ss.opts.failure_abort_ratio;
    st->binding = ss.opts.executor;
    if (ss.fn) st->fn = std::make_shared<StageFn>(std::move(ss.fn));

    int qcap = ss.opts.queue_capacity == -1 ? ss.opts.concurrency : ss.opts.queue_capacity;
    st->out_capacity =
        st->is_last ? im.sink_capacity : static_cast<std::size_t>(std::max(1, qcap));

    switch (st->binding.kind) {
      case ExecutorBinding::Kind::shared_pool:
        st->pool = im.shared_pool.get();
        break;
      case ExecutorBinding::Kind::dedicated_pool:
        st->owned_pool = std::make_unique<ThreadPool>(st->binding.size, st->binding.name);
        st->pool = st->owned_pool.get();
        break;
      case ExecutorBinding::Kind::subprocess_pool:
        st->owned_spool = std::make_unique<SubprocessPool>(st->binding.size, st->binding.name);
        break;
    }
    im.stages.push_back(std::move(st));
  }
  return p;
}

Source source_from(std::vector<Item> items) {
  auto state = std::make_shared<std::pair<std::vector<Item>, std::size_t>>(std::move(items), 0);
  return [state]() -> std::optional<Item> {
    if (state->second >= state->first.size()) return std::nullopt;
    return std::move(state->first[state->second++]);
  };
}

Source counting_source(std::uint64_t n) {
  auto i = std::make_shared<std::uint64_t>(0);
  return [i, n]() -> std::optional<Item> {
    if (*i >= n) return std::nullopt;
    return Item::of<std::uint64_t>((*i)++);
  };
}

}  // namespace spindle
