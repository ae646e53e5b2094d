#include <doctest.h>

#include <atomic>
#include <chrono>
#include <thread>
#include <vector>

#include "spindle/deferred.hpp"
#include "spindle/executor.hpp"
#include "spindle/timer.hpp"

using namespace std::chrono_literals;
using spindle::Deferred;
using spindle::Item;
using spindle::ThreadPool;
using spindle::TimerService;

TEST_SUITE("executors") {
  TEST_CASE("timer fires in deadline order") {
    TimerService timers;
    std::mutex mu;
    std::vector<int> order;
    std::condition_variable cv;
    timers.schedule_after(30ms, [&] {
      std::lock_guard l(mu);
      order.push_back(2);
      cv.notify_all();
    });
    timers.schedule_after(5ms, [&] {
      std::lock_guard l(mu);
      order.push_back(1);
    });
    std::unique_lock lock(mu);
    CHECK(cv.wait_for(lock, 2s, [&] { return order.size() == 2; }));
    CHECK(order == std::vector<int>{1, 2});
  }

  TEST_CASE("timer shutdown drops pending work") {
    std::atomic<int> fired{0};
    {
      TimerService timers;
      timers.schedule_after(10s, [&] { fired++; });
      CHECK(timers.pending() == 1);
      timers.shutdown();
    }
    CHECK(fired.load() == 0);
  }

  TEST_CASE("pool overlaps blocking tasks") {
    ThreadPool pool(10, "t");
    pool.start();
    std::atomic<int> done{0};
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 100; ++i) {
      pool.submit([&] {
        std::this_thread::sleep_for(10ms);
        done++;
      });
    }
    while (done.load() < 100) std::this_thread::sleep_for(1ms);
    auto wall = std::chrono::steady_clock::now() - t0;
    // 100 x 10ms over 10 workers is 100ms of perfectly overlapped work.
    CHECK(wall >= 100ms);
    CHECK(wall <= 300ms);
    pool.shutdown();
  }

  TEST_CASE("dedicated pool of one serializes") {
    ThreadPool pool(1, "solo");
    pool.start();
    std::atomic<int> active{0};
    std::atomic<int> max_active{0};
    std::atomic<int> done{0};
    for (int i = 0; i < 20; ++i) {
      pool.submit([&] {
        int a = ++active;
        int seen = max_active.load();
        while (a > seen && !max_active.compare_exchange_weak(seen, a)) {
        }
        std::this_thread::sleep_for(1ms);
        --active;
        ++done;
      });
    }
    while (done.load() < 20) std::this_thread::sleep_for(1ms);
    CHECK(max_active.load() == 1);
    pool.shutdown();
  }

  TEST_CASE("submit after shutdown throws and runs nothing") {
    ThreadPool pool(2, "t");
    pool.start();
    pool.shutdown();
    std::atomic<bool> ran{false};
    CHECK_THROWS_AS(pool.submit([&] { ran = true; }), spindle::Error);
    std::this_thread::sleep_for(20ms);
    CHECK_FALSE(ran.load());
  }

  TEST_CASE("shutdown detaches a wedged worker past the deadline") {
    auto pool = std::make_unique<ThreadPool>(2, "wedge");
    pool->start();
    std::atomic<bool> release{false};
    pool->submit([&] {
      while (!release.load()) std::this_thread::sleep_for(1ms);
    });
    std::this_thread::sleep_for(20ms);
    auto t0 = std::chrono::steady_clock::now();
    bool clean = pool->shutdown(100ms);
    CHECK_FALSE(clean);
    CHECK(std::chrono::steady_clock::now() - t0 < 1s);
    release = true;  // let the detached worker finish before the binary exits
    std::this_thread::sleep_for(50ms);
  }

  TEST_CASE("deferred settles once, late completions are dropped") {
    auto [deferred, completer] = Deferred::make();
    int calls = 0;
    bool got_ok = false;
    deferred.on_settle([&](bool ok, Item&& v, const std::string&) {
      ++calls;
      got_ok = ok;
      CHECK(v.as<int>() == 5);
    });
    completer.complete(Item::of(5));
    completer.fail("ignored");
    completer.complete(Item::of(6));
    CHECK(calls == 1);
    CHECK(got_ok);
  }

  TEST_CASE("deferred settled before wiring still delivers") {
    auto [deferred, completer] = Deferred::make();
    completer.fail("early");
    bool delivered = false;
    deferred.on_settle([&](bool ok, Item&&, const std::string& err) {
      delivered = true;
      CHECK_FALSE(ok);
      CHECK(err == "early");
    });
    CHECK(delivered);
  }

  TEST_CASE("abandoned deferred ignores the completion") {
    auto [deferred, completer] = Deferred::make();
    bool delivered = false;
    deferred.on_settle([&](bool, Item&&, const std::string&) { delivered = true; });
    deferred.abandon();
    completer.complete(Item::of(1));
    CHECK_FALSE(delivered);
  }
}
