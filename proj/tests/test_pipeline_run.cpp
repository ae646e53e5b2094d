#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <mutex>
#include <set>
#include <thread>

#include "helpers.hpp"
#include "spindle/deferred.hpp"
#include "spindle/pipeline.hpp"
#include "spindle/timer.hpp"

using namespace spindle;
using namespace spindle_test;

TEST_SUITE("pipeline_run") {
  TEST_CASE("empty source yields EndOfStream immediately") {
    PipelineBuilder b;
    b.add_source(int_source(0)).pipe("id", int_map([](int x) { return x; })).add_sink(2);
    auto p = b.build(1);
    auto n = p->next(1000ms);
    CHECK(n.is_eos());
    CHECK_THROWS_AS(p->next(10ms), Error);  // after EndOfStream
    p->stop();
  }

  TEST_CASE("empty stage list pipes source straight to sink") {
    PipelineBuilder b;
    b.add_source(int_source(5)).add_sink(2);
    auto p = b.build(1);
    CHECK(drain_ints(*p) == std::vector<int>{0, 1, 2, 3, 4});
    p->stop();
  }

  TEST_CASE("identity stage at concurrency 1 preserves order in fifo mode") {
    PipelineBuilder b;
    b.add_source(int_source(10))
        .pipe("id", int_map([](int x) { return x; }))
        .add_sink(3)
        .ordering(Ordering::fifo);
    auto p = b.build(2);
    CHECK(drain_ints(*p) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    p->stop();
  }

  TEST_CASE("pure map at concurrency 3 emits the expected multiset") {
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 3;
    b.add_source(source_from([] {
       std::vector<Item> v;
       for (int x : {1, 2, 3}) v.push_back(Item::of(x));
       return v;
     }()))
        .pipe("inc", int_map([](int x) { return x + 1; }), o)
        .add_sink(3);
    auto p = b.build(3);
    auto out = drain_ints(*p);
    std::sort(out.begin(), out.end());
    CHECK(out == std::vector<int>{2, 3, 4});
    p->stop();
  }

  TEST_CASE("skip_and_record keeps failures out of the sink") {
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 2;
    b.add_source(int_source(10))  // 0..9
        .pipe("odd_only",
              [](Item it) -> StageOutcome {
                int x = it.take<int>();
                if (x % 2 == 0) throw Error("even input");
                return Item::of(x);
              },
              o)
        .add_sink(3);
    auto p = b.build(2);
    auto out = drain_ints(*p);
    CHECK(out.size() == 5);
    auto snap = p->snapshot();
    CHECK(snap.stages[0].failed == 5);
    CHECK(snap.stages[0].succeeded == 5);
    CHECK(snap.failed_items == 5);
    auto report = p->stop();
    CHECK(report.items_emitted == 5);
    CHECK(report.items_failed == 5);
    CHECK(report.items_abandoned == 0);
  }

  TEST_CASE("aggregate 100 by 32 with flush keeps the remainder") {
    PipelineBuilder b;
    b.add_source(int_source(100)).aggregate(32, true).add_sink(2);
    auto p = b.build(1);
    std::vector<std::size_t> sizes;
    for (;;) {
      auto n = p->next();
      if (n.is_eos()) break;
      sizes.push_back(n.value.take<ItemList>().size());
    }
    CHECK(sizes == std::vector<std::size_t>{32, 32, 32, 4});
    auto report = p->stop();
    CHECK(report.items_emitted == 100);
    CHECK(report.items_dropped_remainder == 0);
  }

  TEST_CASE("aggregate without flush drops and counts the remainder") {
    PipelineBuilder b;
    b.add_source(int_source(100)).aggregate(32, false).add_sink(2);
    auto p = b.build(1);
    std::vector<std::size_t> sizes;
    for (;;) {
      auto n = p->next();
      if (n.is_eos()) break;
      sizes.push_back(n.value.take<ItemList>().size());
    }
    CHECK(sizes == std::vector<std::size_t>{32, 32, 32});
    auto report = p->stop();
    CHECK(report.items_emitted == 96);
    CHECK(report.items_dropped_remainder == 4);
  }

  TEST_CASE("aggregate of an empty source emits nothing") {
    PipelineBuilder b;
    b.add_source(int_source(0)).aggregate(32, true).add_sink(2);
    auto p = b.build(1);
    CHECK(p->next().is_eos());
    p->stop();
  }

  TEST_CASE("sink holds at most its capacity while the consumer pauses") {
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 4;
    b.add_source(int_source(50)).pipe("id", int_map([](int x) { return x; }), o).add_sink(3);
    auto p = b.build(4);
    p->start();
    std::this_thread::sleep_for(300ms);  // consumer paused
    auto snap = p->snapshot();
    CHECK(snap.stages[0].output_queue.max <= 3);
    auto out = drain_ints(*p);
    CHECK(out.size() == 50);
    snap = p->snapshot();
    CHECK(snap.stages[0].output_queue.max <= 3);
    p->stop();
  }

  TEST_CASE("huge buffer swallows a small source entirely") {
    PipelineBuilder b;
    b.add_source(int_source(10)).add_sink(1000);
    auto p = b.build(1);
    p->start();
    std::this_thread::sleep_for(100ms);
    auto snap = p->snapshot();
    CHECK(snap.source_pulled == 10);  // exhausted before any consumption
    CHECK(drain_ints(*p).size() == 10);
    p->stop();
  }

  TEST_CASE("buffer of one still completes") {
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 4;
    o.queue_capacity = 4;
    b.add_source(int_source(30)).pipe("id", int_map([](int x) { return x; }), o).add_sink(1);
    auto p = b.build(2);
    CHECK(drain_ints(*p).size() == 30);
    p->stop();
  }

  TEST_CASE("next with timeout returns timed_out without side effects") {
    PipelineBuilder b;
    b.add_source(int_source(1))
        .pipe("slow",
              [](Item it) -> StageOutcome {
                std::this_thread::sleep_for(250ms);
                return it;
              })
        .add_sink(2);
    auto p = b.build(1);
    auto n = p->next(30ms);
    CHECK(n.timed_out());
    auto n2 = p->next(2000ms);
    CHECK(n2.is_item());
    CHECK(p->next().is_eos());
    p->stop();
  }

  TEST_CASE("deferred stages hold no pool worker while waiting") {
    // 8 concurrent 100ms waits through a 1-worker pool: only timer-driven
    // completions can overlap that much.
    auto timers = std::make_shared<TimerService>();
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 8;
    b.add_source(int_source(8))
        .pipe("wait",
              [timers](Item it) -> StageOutcome {
                auto [d, c] = Deferred::make();
                auto boxed = std::make_shared<Item>(std::move(it));
                timers->schedule_after(100ms, [c, boxed]() mutable {
                  c.complete(std::move(*boxed));
                });
                return d;
              },
              o)
        .add_sink(8);
    auto p = b.build(1);
    auto t0 = std::chrono::steady_clock::now();
    auto out = drain_ints(*p);
    auto wall = std::chrono::steady_clock::now() - t0;
    CHECK(out.size() == 8);
    CHECK(wall < 400ms);  // sequential would be 800ms
    p->stop();
  }

  TEST_CASE("fifo order holds under concurrency with uneven task times") {
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 8;
    b.add_source(int_source(200))
        .pipe("jitter",
              [](Item it) -> StageOutcome {
                int x = it.take<int>();
                std::this_thread::sleep_for(std::chrono::microseconds((x * 7919) % 997));
                return Item::of(x);
              },
              o)
        .add_sink(4)
        .ordering(Ordering::fifo);
    auto p = b.build(8);
    auto out = drain_ints(*p);
    REQUIRE(out.size() == 200);
    CHECK(std::is_sorted(out.begin(), out.end()));
    p->stop();
  }

  TEST_CASE("completion order yields the same multiset as fifo") {
    auto run = [](Ordering ord) {
      PipelineBuilder b;
      StageOptions o;
      o.concurrency = 6;
      b.add_source(int_source(100))
          .pipe("jitter",
                [](Item it) -> StageOutcome {
                  int x = it.take<int>();
                  std::this_thread::sleep_for(std::chrono::microseconds((x * 131) % 383));
                  return Item::of(x * 3);
                },
                o)
          .add_sink(4)
          .ordering(ord);
      auto p = b.build(4);
      auto out = drain_ints(*p);
      p->stop();
      std::multiset<int> m(out.begin(), out.end());
      return m;
    };
    CHECK(run(Ordering::fifo) == run(Ordering::completion_order));
  }

  TEST_CASE("no stage function runs on the control thread") {
    PipelineBuilder b;
    auto ids = std::make_shared<std::set<std::thread::id>>();
    auto mu = std::make_shared<std::mutex>();
    StageOptions o;
    o.concurrency = 4;
    b.add_source(int_source(50))
        .pipe("probe",
              [ids, mu](Item it) -> StageOutcome {
                std::lock_guard lock(*mu);
                ids->insert(std::this_thread::get_id());
                return it;
              },
              o)
        .add_sink(4);
    auto p = b.build(4);
    CHECK(drain_ints(*p).size() == 50);
    CHECK_FALSE(ids->contains(p->control_thread_id()));
    CHECK_FALSE(ids->contains(std::this_thread::get_id()));
    p->stop();
  }

  TEST_CASE("worker_count one still completes with oversubscribed stages") {
    PipelineBuilder b;
    StageOptions o1;
    o1.concurrency = 12;
    StageOptions o2;
    o2.concurrency = 4;
    b.add_source(int_source(100))
        .pipe("a", int_map([](int x) { return x + 1; }), o1)
        .pipe("b", int_map([](int x) { return x * 2; }), o2)
        .add_sink(3);
    auto p = b.build(1);
    auto out = drain_ints(*p);
    CHECK(out.size() == 100);
    int sum = 0;
    for (int v : out) sum += v;
    CHECK(sum == 2 * (100 * 101 / 2));  // sum of 2*(x+1) over 0..99
    p->stop();
  }

  TEST_CASE("mixed executors across stages") {
    PipelineBuilder b;
    StageOptions ded;
    ded.concurrency = 2;
    ded.executor = ExecutorBinding::dedicated(2, "ded");
    b.add_source(int_source(40))
        .pipe("shared", int_map([](int x) { return x + 1; }))
        .pipe("dedicated", int_map([](int x) { return x * 2; }), ded)
        .add_sink(4);
    auto p = b.build(2);
    auto out = drain_ints(*p);
    CHECK(out.size() == 40);
    p->stop();
  }

  TEST_CASE("lazy million-entry source costs nothing at build and first pull") {
    auto pulls = std::make_shared<std::uint64_t>(0);
    Source lazy = [pulls]() -> std::optional<Item> {
      if (*pulls >= 1000000) return std::nullopt;
      return Item::of(static_cast<int>((*pulls)++));
    };
    PipelineBuilder b;
    StageOptions o;
    o.concurrency = 2;
    b.add_source(std::move(lazy)).pipe("id", int_map([](int x) { return x; }), o).add_sink(3);
    auto p = b.build(2);
    CHECK(*pulls == 0);
    auto n = p->next(2000ms);
    CHECK(n.is_item());
    // Demand-driven admission: pulls bounded by resident capacity, nowhere
    // near the million entries.
    CHECK(*pulls <= 16);
    p->stop();
  }

  TEST_CASE("scoped_run stops on success and on error") {
    PipelineBuilder b;
    b.add_source(int_source(5)).add_sink(2);
    auto p = b.build(1);
    int got = scoped_run(*p, [](Pipeline& pl) {
      int count = 0;
      while (!pl.next().is_eos()) ++count;
      return count;
    });
    CHECK(got == 5);
    CHECK(p->state() == PipelineState::stopped);

    PipelineBuilder b2;
    b2.add_source(int_source(5)).add_sink(2);
    auto p2 = b2.build(1);
    CHECK_THROWS_AS(scoped_run(*p2,
                               [](Pipeline& pl) {
                                 pl.next();
                                 throw Error("consumer boom");
                               }),
                    Error);
    CHECK(p2->state() == PipelineState::stopped);
    CHECK(p2->stop_report().items_emitted == 1);
  }

  TEST_CASE("nested scoped_run is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(5)).add_sink(2);
    auto p = b.build(1);
    scoped_run(*p, [&](Pipeline& pl) {
      CHECK_THROWS_AS(scoped_run(pl, [](Pipeline&) { return 0; }), Error);
      return 0;
    });
  }
}
