#pragma once

#include <cstdint>
#include <string_view>

namespace spindle::trace {

/// True when SPINDLE_TRACE=1 was set in the environment at first use.
bool enabled();

/// One line per stage event, written to stderr:
///   stage=<name> event={start,ok,fail,eos} item_seq=<n> dur_us=<n>
void stage_event(std::string_view stage, std::string_view event, std::uint64_t item_seq,
                 std::uint64_t dur_us);

}  // namespace spindle::trace
