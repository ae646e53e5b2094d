#pragma once

#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <thread>

#include "spindle/subprocess.hpp"
#include "spindle/wire.hpp"

namespace spindle_test {

inline void register_test_remote_functions() {
  auto& reg = spindle::FunctionRegistry::global();
  reg.register_fn("test.upper", [](const spindle::Bytes& in) {
    spindle::Bytes out = in;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](std::uint8_t c) { return static_cast<std::uint8_t>(std::toupper(c)); });
    return out;
  });
  reg.register_fn("test.sleep_ms", [](const spindle::Bytes& in) {
    std::uint32_t ms = in.size() >= 4 ? spindle::wire::get_u32(in) : 0;
    std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    return in;
  });
  reg.register_fn("test.exit", [](const spindle::Bytes&) -> spindle::Bytes {
    _exit(7);  // simulated worker crash
  });
  reg.register_fn("test.hang", [](const spindle::Bytes& in) {
    std::this_thread::sleep_for(std::chrono::seconds(120));
    return in;
  });
  reg.register_fn("test.throwing", [](const spindle::Bytes&) -> spindle::Bytes {
    throw std::runtime_error("remote boom");
  });
}

}  // namespace spindle_test
