#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace spindle {

/// Fixed 64-bucket log-scaled histogram covering 1us .. 100s. Bounded
/// memory, no per-task allocation; quantiles are bucket-midpoint
/// approximations.
namespace latency_buckets {

inline constexpr int kCount = 64;
inline constexpr double kMinUs = 1.0;
inline constexpr double kMaxUs = 1e8;  // 100 s

int bucket_of(std::uint64_t us);
std::uint64_t bucket_mid_us(int bucket);
std::uint64_t quantile_us(const std::array<std::uint64_t, kCount>& counts, double q);

}  // namespace latency_buckets

struct DurationStats {
  std::uint64_t count = 0;
  std::uint64_t sum_us = 0;
  std::uint64_t min_us = 0;
  std::uint64_t max_us = 0;
  std::uint64_t p50_us = 0;
  std::uint64_t p99_us = 0;
};

struct QueueStats {
  std::uint64_t samples = 0;
  std::uint64_t sum = 0;
  std::uint64_t max = 0;
  std::uint64_t capacity = 0;

  double mean() const { return samples == 0 ? 0.0 : static_cast<double>(sum) / samples; }
};

struct StageStatsSnapshot {
  std::string name;
  std::string kind;  // "map" or "aggregate"
  int concurrency = 1;

  std::uint64_t dequeued = 0;   // items taken from this stage's input
  std::uint64_t succeeded = 0;  // task completions without error
  std::uint64_t failed = 0;     // task completions with error
  std::uint64_t abandoned = 0;  // tasks discarded by stop/abort before completing
  std::int64_t in_flight = 0;

  /// Source-item weight of failed items; differs from `failed` downstream of
  /// an aggregate stage, where one envelope carries a whole batch.
  std::uint64_t failed_items = 0;

  DurationStats task_duration;
  QueueStats output_queue;

  /// Wall time this stage sat ready to run but couldn't get an output-queue
  /// slot, i.e. time spent blocked by its downstream.
  std::uint64_t blocked_on_put_us = 0;
};

struct PipelineStatsSnapshot {
  std::vector<StageStatsSnapshot> stages;

  std::uint64_t source_pulled = 0;
  std::uint64_t sink_emitted = 0;   // envelopes handed to the consumer
  std::uint64_t emitted_items = 0;  // source-item weight of those envelopes
  std::uint64_t failed_items = 0;
  std::uint64_t abandoned_items = 0;
  std::uint64_t remainder_dropped_items = 0;

  std::uint64_t wall_time_us = 0;
  std::uint64_t ttfb_us = 0;  // 0 until the first item reaches the sink
};

/// Stable JSON rendering of a snapshot (documented in the README); keys are
/// emitted in a fixed order so equal snapshots serialize identically.
std::string to_json(const PipelineStatsSnapshot& s);

struct BottleneckHint {
  bool conclusive = false;
  std::string stage;  // a stage name, "source", or "sink-consumer"
  std::string reason;
};

/// Names the stage most likely limiting throughput, with the rule applied.
/// Needs at least 100 sink items to say anything.
BottleneckHint bottleneck_hint(const PipelineStatsSnapshot& s);

}  // namespace spindle
