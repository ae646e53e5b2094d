#include <doctest.h>

#include "helpers.hpp"
#include "spindle/pipeline.hpp"

using namespace spindle;
using namespace spindle_test;

TEST_SUITE("builder") {
  TEST_CASE("duplicate source is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3));
    CHECK_THROWS_AS(b.add_source(int_source(3)), ConfigError);
  }

  TEST_CASE("pipe before source is rejected") {
    PipelineBuilder b;
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; })), ConfigError);
  }

  TEST_CASE("zero concurrency and zero queue capacity are rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3));
    StageOptions bad_conc;
    bad_conc.concurrency = 0;
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; }), bad_conc), ConfigError);
    StageOptions bad_q;
    bad_q.queue_capacity = 0;
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; }), bad_q), ConfigError);
  }

  TEST_CASE("failure_abort_ratio outside (0,1] is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3));
    StageOptions o;
    o.failure_abort_ratio = 0.0;
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; }), o), ConfigError);
    o.failure_abort_ratio = 1.5;
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; }), o), ConfigError);
  }

  TEST_CASE("aggregate batch_size zero is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3));
    CHECK_THROWS_AS(b.aggregate(0), ConfigError);
  }

  TEST_CASE("duplicate sink is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3)).add_sink(2);
    CHECK_THROWS_AS(b.add_sink(2), ConfigError);
  }

  TEST_CASE("sink before source is rejected") {
    PipelineBuilder b;
    CHECK_THROWS_AS(b.add_sink(2), ConfigError);
  }

  TEST_CASE("build requires source and sink") {
    PipelineBuilder b1;
    CHECK_THROWS_AS(b1.build(1), ConfigError);
    PipelineBuilder b2;
    b2.add_source(int_source(3));
    CHECK_THROWS_AS(b2.build(1), ConfigError);
  }

  TEST_CASE("invalid worker_count is rejected") {
    PipelineBuilder b;
    b.add_source(int_source(3)).add_sink(2);
    CHECK_THROWS_AS(b.build(0), ConfigError);
  }

  TEST_CASE("builder is single use") {
    PipelineBuilder b;
    b.add_source(int_source(3)).add_sink(2);
    auto p = b.build(1);
    CHECK_THROWS_AS(b.build(1), ConfigError);
    p->stop();
  }

  TEST_CASE("subprocess binding requires pipe_remote") {
    PipelineBuilder b;
    b.add_source(int_source(3));
    StageOptions o;
    o.executor = ExecutorBinding::subprocess(2);
    CHECK_THROWS_AS(b.pipe("f", int_map([](int x) { return x; }), o), ConfigError);
  }

  TEST_CASE("build pulls nothing from the source") {
    auto pulls = std::make_shared<int>(0);
    Source counted = [pulls]() -> std::optional<Item> {
      ++*pulls;
      return Item::of(1);
    };
    PipelineBuilder b;
    b.add_source(std::move(counted)).pipe("id", int_map([](int x) { return x; })).add_sink(2);
    auto p = b.build(2);
    CHECK(*pulls == 0);
    CHECK(p->state() == PipelineState::built);
    p->stop();
    CHECK(*pulls == 0);
  }
}
