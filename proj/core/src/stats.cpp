#include "spindle/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace spindle {

namespace latency_buckets {

namespace {
const double kLogMin = std::log(kMinUs);
const double kLogMax = std::log(kMaxUs);
}  // namespace

int bucket_of(std::uint64_t us) {
  if (us <= 1) return 0;
  double x = (std::log(static_cast<double>(us)) - kLogMin) / (kLogMax - kLogMin);
  int b = static_cast<int>(x * kCount);
  return std::clamp(b, 0, kCount - 1);
}

std::uint64_t bucket_mid_us(int bucket) {
  double lo = kLogMin + (kLogMax - kLogMin) * bucket / kCount;
  double hi = kLogMin + (kLogMax - kLogMin) * (bucket + 1) / kCount;
  return static_cast<std::uint64_t>(std::exp((lo + hi) / 2.0));
}

std::uint64_t quantile_us(const std::array<std::uint64_t, kCount>& counts, double q) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total == 0) return 0;
  auto target = static_cast<std::uint64_t>(std::ceil(q * static_cast<double>(total)));
  if (target == 0) target = 1;
  std::uint64_t seen = 0;
  for (int b = 0; b < kCount; ++b) {
    seen += counts[b];
    if (seen >= target) return bucket_mid_us(b);
  }
  return bucket_mid_us(kCount - 1);
}

}  // namespace latency_buckets

namespace {

void append_kv(std::ostringstream& os, const char* key, std::uint64_t v, bool comma = true) {
  os << '"' << key << "\":" << v;
  if (comma) os << ',';
}

std::string escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else if (static_cast<unsigned char>(c) < 0x20) {
      out += ' ';
    } else {
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::string to_json(const PipelineStatsSnapshot& s) {
  std::ostringstream os;
  os << "{\"stages\":[";
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    const auto& st = s.stages[i];
    if (i) os << ',';
    os << "{\"name\":\"" << escape(st.name) << "\",\"kind\":\"" << st.kind
       << "\",\"concurrency\":" << st.concurrency << ',';
    append_kv(os, "dequeued", st.dequeued);
    append_kv(os, "succeeded", st.succeeded);
    append_kv(os, "failed", st.failed);
    append_kv(os, "abandoned", st.abandoned);
    os << "\"in_flight\":" << st.in_flight << ',';
    append_kv(os, "failed_items", st.failed_items);
    os << "\"task_duration\":{";
    append_kv(os, "count", st.task_duration.count);
    append_kv(os, "sum_us", st.task_duration.sum_us);
    append_kv(os, "min_us", st.task_duration.min_us);
    append_kv(os, "max_us", st.task_duration.max_us);
    append_kv(os, "p50_us", st.task_duration.p50_us);
    append_kv(os, "p99_us", st.task_duration.p99_us, false);
    os << "},\"output_queue\":{";
    append_kv(os, "samples", st.output_queue.samples);
    append_kv(os, "sum", st.output_queue.sum);
    append_kv(os, "max", st.output_queue.max);
    append_kv(os, "capacity", st.output_queue.capacity, false);
    os << "},";
    append_kv(os, "blocked_on_put_us", st.blocked_on_put_us, false);
    os << '}';
  }
  os << "],";
  append_kv(os, "source_pulled", s.source_pulled);
  append_kv(os, "sink_emitted", s.sink_emitted);
  append_kv(os, "emitted_items", s.emitted_items);
  append_kv(os, "failed_items", s.failed_items);
  append_kv(os, "abandoned_items", s.abandoned_items);
  append_kv(os, "remainder_dropped_items", s.remainder_dropped_items);
  append_kv(os, "wall_time_us", s.wall_time_us);
  append_kv(os, "ttfb_us", s.ttfb_us, false);
  os << '}';
  return os.str();
}

BottleneckHint bottleneck_hint(const PipelineStatsSnapshot& s) {
  BottleneckHint hint;
  if (s.sink_emitted < 100) {
    hint.conclusive = false;
    hint.stage = "";
    hint.reason = "inconclusive: fewer than 100 sink items observed";
    return hint;
  }
  const double wall = static_cast<double>(std::max<std::uint64_t>(s.wall_time_us, 1));

  // Rule 1: a stage spending a large share of wall time blocked on its output
  // queue points at whoever drains that queue.
  double worst_blocked = 0.0;
  std::size_t worst_idx = 0;
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    double share = static_cast<double>(s.stages[i].blocked_on_put_us) / wall;
    if (share > worst_blocked) {
      worst_blocked = share;
      worst_idx = i;
    }
  }
  if (worst_blocked >= 0.10) {
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.0f%%", worst_blocked * 100.0);
    hint.conclusive = true;
    if (worst_idx + 1 < s.stages.size()) {
      hint.stage = s.stages[worst_idx + 1].name;
      hint.reason = "stage '" + s.stages[worst_idx].name + "' was blocked " + pct +
                    " of wall time putting into '" + hint.stage + "' input queue";
    } else {
      hint.stage = "sink-consumer";
      hint.reason = "stage '" + s.stages[worst_idx].name + "' was blocked " + pct +
                    " of wall time putting into the sink; the consumer cannot keep up";
    }
    return hint;
  }

  // Rule 2: a stage keeping its concurrency busy most of the run is
  // compute-bound.
  double worst_util = 0.0;
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    const auto& st = s.stages[i];
    if (st.concurrency <= 0) continue;
    double util = static_cast<double>(st.task_duration.sum_us) / (wall * st.concurrency);
    if (util > worst_util) {
      worst_util = util;
      worst_idx = i;
    }
  }
  if (worst_util >= 0.5) {
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.0f%%", std::min(worst_util, 1.0) * 100.0);
    hint.conclusive = true;
    hint.stage = s.stages[worst_idx].name;
    hint.reason = "stage '" + hint.stage + "' kept its task slots busy " + pct +
                  " of wall time while nothing upstream was blocked";
    return hint;
  }

  // Rule 3: nothing blocked, nothing saturated -> the source cannot keep up.
  hint.conclusive = true;
  hint.stage = "source";
  hint.reason = "no stage is saturated or blocked on its output; the pipeline is starved "
                "by the source";
  return hint;
}

}  // namespace spindle
