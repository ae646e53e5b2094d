#pragma once

#include <chrono>
#include <cstdint>
#include <vector>

#include "spindle/pipeline.hpp"

namespace spindle_test {

using namespace std::chrono_literals;

inline spindle::StageFn int_map(int (*f)(int)) {
  return [f](spindle::Item item) -> spindle::StageOutcome {
    return spindle::Item::of(f(item.take<int>()));
  };
}

inline spindle::Source int_source(int n) {
  auto i = std::make_shared<int>(0);
  return [i, n]() -> std::optional<spindle::Item> {
    if (*i >= n) return std::nullopt;
    return spindle::Item::of((*i)++);
  };
}

/// Drains the pipeline to EndOfStream, returning every int item in arrival
/// order.
inline std::vector<int> drain_ints(spindle::Pipeline& p) {
  std::vector<int> out;
  for (;;) {
    auto n = p.next();
    if (n.is_eos()) break;
    out.push_back(n.value.take<int>());
  }
  return out;
}

inline std::uint64_t now_us() {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::microseconds>(
                                        std::chrono::steady_clock::now().time_since_epoch())
                                        .count());
}

}  // namespace spindle_test
