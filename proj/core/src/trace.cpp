#include "spindle/trace.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace spindle::trace {

bool enabled() {
  static const bool on = [] {
    const char* v = std::getenv("SPINDLE_TRACE");
    return v != nullptr && std::strcmp(v, "1") == 0;
  }();
  return on;
}

void stage_event(std::string_view stage, std::string_view event, std::uint64_t item_seq,
                 std::uint64_t dur_us) {
  if (!enabled()) return;
  // Single fprintf call so concurrent writers do not interleave mid-line.
  std::fprintf(stderr, "stage=%.*s event=%.*s item_seq=%llu dur_us=%llu\n",
               static_cast<int>(stage.size()), stage.data(), static_cast<int>(event.size()),
               event.data(), static_cast<unsigned long long>(item_seq),
               static_cast<unsigned long long>(dur_us));
}

}  // namespace spindle::trace
