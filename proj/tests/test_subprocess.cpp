#include <doctest.h>

#include <chrono>
#include <cstdlib>

#include "helpers.hpp"
#include "spindle/subprocess.hpp"
#include "spindle/wire.hpp"

using namespace std::chrono_literals;
using spindle::Bytes;
using spindle::SubprocessPool;

namespace {

Bytes bytes_of(const char* s) {
  return Bytes(s, s + std::strlen(s));
}

}  // namespace

TEST_SUITE("subprocess") {
  TEST_CASE("identity round trip is byte-exact") {
    SubprocessPool pool(1);
    pool.start();
    Bytes payload{0xDE, 0xAD, 0xBE, 0xEF};
    CHECK(pool.call("spindle.echo", payload) == payload);
    auto st = pool.shutdown();
    CHECK(st.clean());
    CHECK(st.exited == 1);
  }

  TEST_CASE("unregistered function yields an error naming it") {
    SubprocessPool pool(1);
    pool.start();
    try {
      pool.call("no.such.fn", {});
      FAIL("expected an error");
    } catch (const spindle::Error& e) {
      CHECK(std::string(e.what()).find("no.such.fn") != std::string::npos);
    }
    pool.shutdown();
  }

  TEST_CASE("remote exception becomes an error result") {
    SubprocessPool pool(1);
    pool.start();
    try {
      pool.call("test.throwing", {});
      FAIL("expected an error");
    } catch (const spindle::Error& e) {
      CHECK(std::string(e.what()).find("remote boom") != std::string::npos);
    }
    pool.shutdown();
  }

  TEST_CASE("exactly one serialization each way per call") {
    SubprocessPool pool(2);
    pool.start();
    for (int i = 0; i < 10; ++i) pool.call("test.upper", bytes_of("abc"));
    auto c = pool.counters();
    CHECK(c.calls_encoded == 10);
    CHECK(c.results_decoded == 10);
    CHECK(c.bytes_sent > 0);
    CHECK(c.bytes_received > 0);
    pool.shutdown();
  }

  TEST_CASE("crashed worker fails the task and is respawned") {
    SubprocessPool pool(1);
    pool.start();
    CHECK_THROWS_AS(pool.call("test.exit", {}), spindle::Error);
    // the respawned worker picks up new work
    CHECK(pool.call("test.upper", bytes_of("ok")) == bytes_of("OK"));
    CHECK(pool.counters().workers_respawned == 1);
    pool.shutdown();
  }

  TEST_CASE("workers start concurrently, not sequentially") {
    setenv("SPINDLE_WORKER_INIT_DELAY_MS", "150", 1);
    auto t0 = std::chrono::steady_clock::now();
    SubprocessPool pool(4);
    pool.start();
    auto wall = std::chrono::steady_clock::now() - t0;
    unsetenv("SPINDLE_WORKER_INIT_DELAY_MS");
    // 4 workers each taking 150ms to initialize: concurrent launch costs
    // about one worker's init, far less than the 600ms a sequential launch
    // would take.
    CHECK(wall >= 150ms);
    CHECK(wall < 450ms);
    pool.shutdown();
  }

  TEST_CASE("shutdown kills a hung worker past the deadline") {
    SubprocessPool pool(1);
    pool.start();
    std::atomic<bool> failed{false};
    Bytes ms;
    spindle::wire::put_u32(ms, 60000);
    pool.submit("test.sleep_ms", ms, [&](spindle::RemoteResult r) { failed = !r.ok; });
    std::this_thread::sleep_for(50ms);  // let the call reach the worker
    auto t0 = std::chrono::steady_clock::now();
    auto st = pool.shutdown(100ms);
    CHECK(std::chrono::steady_clock::now() - t0 < 2s);
    CHECK(st.killed == 1);
    CHECK_FALSE(st.clean());
  }

  TEST_CASE("submit after shutdown fails the callback") {
    SubprocessPool pool(1);
    pool.start();
    pool.shutdown();
    bool called = false;
    pool.submit("spindle.echo", {}, [&](spindle::RemoteResult r) {
      called = true;
      CHECK_FALSE(r.ok);
    });
    CHECK(called);
  }
}
