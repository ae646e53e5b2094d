#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "spindle/deferred.hpp"
#include "spindle/error.hpp"
#include "spindle/executor.hpp"
#include "spindle/item.hpp"
#include "spindle/stats.hpp"

namespace spindle {

/// Lazily pulled item source; nullopt means exhausted. Pulled only from the
/// control thread, and only when the first stage has room, so building a
/// pipeline over a huge source does no upfront work.
using Source = std::function<std::optional<Item>()>;

/// What a stage function may return: the result itself, or a Deferred when
/// the work completes elsewhere (timer, remote worker). Returning a Deferred
/// frees the pool worker immediately; the task still counts against the
/// stage's concurrency until it settles.
class StageOutcome {
 public:
  StageOutcome(Item item) : item_(std::move(item)) {}
  StageOutcome(Deferred deferred) : deferred_(std::move(deferred)) {}

  bool is_deferred() const { return deferred_.valid(); }
  Item&& take_item() { return std::move(item_); }
  Deferred& deferred() { return deferred_; }

 private:
  Item item_;
  Deferred deferred_;
};

/// One item in, one StageOutcome out. Must tolerate concurrent invocation up
/// to the stage's concurrency and must not retain references to its input.
/// Errors are reported by throwing.
using StageFn = std::function<StageOutcome(Item)>;

enum class ErrorPolicy {
  skip_and_record,  // drop the item, count it, keep going
  fail_fast,        // first failure aborts the pipeline
};

enum class Ordering {
  completion_order,  // default: maximizes throughput
  fifo,              // sink order equals source order, via a reorder buffer
};

struct StageOptions {
  int concurrency = 1;
  /// Output queue slots; -1 means "same as concurrency". Zero is rejected.
  int queue_capacity = -1;
  ExecutorBinding executor = ExecutorBinding::shared();
  ErrorPolicy error_policy = ErrorPolicy::skip_and_record;
  /// When set, abort the pipeline once the failure share over the last 100
  /// task completions of this stage exceeds the ratio. Must lie in (0, 1].
  std::optional<double> failure_abort_ratio;
};

struct StopReport {
  std::uint64_t items_emitted = 0;
  std::uint64_t items_failed = 0;
  std::uint64_t items_abandoned = 0;
  std::uint64_t items_dropped_remainder = 0;
  bool drain_deadline_hit = false;
};

enum class PipelineState { built, running, draining, stopped };

struct Next {
  enum class Status { item, end_of_stream, timed_out };
  Status status = Status::timed_out;
  Item value;

  bool is_item() const { return status == Status::item; }
  bool is_eos() const { return status == Status::end_of_stream; }
  bool timed_out() const { return status == Status::timed_out; }
};

class PipelineBuilder;

/// A built pipeline. Single consumer; stats readable from any thread.
/// Destruction stops it with the default drain deadline.
class Pipeline {
 public:
  static constexpr std::chrono::milliseconds kDefaultDrainDeadline{10000};

  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Spawns executors and the control thread. Idempotent; next() calls it
  /// implicitly, so nothing runs until the consumer is ready.
  void start();

  /// Takes one item from the sink. Returns EndOfStream exactly once, after
  /// every non-failed item; calling again afterwards throws. A timeout
  /// returns timed_out with no side effects.
  Next next(std::optional<std::chrono::milliseconds> timeout = std::nullopt);

  /// Ceases source pulls, awaits in-flight tasks up to the deadline, counts
  /// whatever is still resident as abandoned, and joins all background
  /// threads. Never throws; idempotent (repeat calls return the same report).
  StopReport stop(std::chrono::milliseconds drain_deadline = kDefaultDrainDeadline);

  PipelineState state() const;
  PipelineStatsSnapshot snapshot() const;
  StopReport stop_report() const;  // zeros until stopped

  /// Thread identity of the control thread (set once started); stage
  /// functions never run on it.
  std::thread::id control_thread_id() const;

 private:
  friend class PipelineBuilder;
  template <class F>
  friend auto scoped_run(Pipeline& p, F&& body) -> decltype(body(p));

  Pipeline();
  bool claim_scope();
  void release_scope();

  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::atomic<bool> scope_claimed_{false};
};

/// Runs `body(pipeline)` and guarantees stop() on every exit path,
/// propagating the body's exception after cleanup. Nesting on the same
/// pipeline throws.
template <class F>
auto scoped_run(Pipeline& p, F&& body) -> decltype(body(p)) {
  if (!p.claim_scope()) throw Error("scoped_run already active on this pipeline");
  struct Guard {
    Pipeline& p;
    ~Guard() {
      p.stop();
      p.release_scope();
    }
  } guard{p};
  return body(p);
}

/// Declarative pipeline description: one source, ordered stages, one sink.
/// Single use; build() consumes it.
class PipelineBuilder {
 public:
  PipelineBuilder();
  ~PipelineBuilder();
  PipelineBuilder(PipelineBuilder&&) noexcept;
  PipelineBuilder& operator=(PipelineBuilder&&) noexcept;

  PipelineBuilder& add_source(Source source);
  PipelineBuilder& pipe(std::string name, StageFn fn, StageOptions opts = {});
  /// Stage executed in a subprocess pool; items must hold Bytes and
  /// `func_name` must be registered in FunctionRegistry::global() before the
  /// pipeline starts. opts.executor is forced to a subprocess binding (its
  /// size is taken from opts.executor.size when already subprocess-kind).
  PipelineBuilder& pipe_remote(std::string name, std::string func_name, StageOptions opts = {});
  /// Collects batch_size consecutive items into one ItemList item. The final
  /// short batch is emitted iff flush_remainder, otherwise counted as
  /// dropped remainder.
  PipelineBuilder& aggregate(int batch_size, bool flush_remainder = true);
  PipelineBuilder& add_sink(int buffer_size);
  PipelineBuilder& ordering(Ordering mode);

  /// worker_count sizes the shared pool (stage concurrencies may sum higher;
  /// tasks then wait for workers).
  std::unique_ptr<Pipeline> build(int worker_count);

 private:
  struct Spec;
  std::unique_ptr<Spec> spec_;
};

/// Source over a pre-built vector.
Source source_from(std::vector<Item> items);
/// Source yielding std::uint64_t 0..n-1.
Source counting_source(std::uint64_t n);

}  // namespace spindle
