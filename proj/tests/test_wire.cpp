#include <doctest.h>

#include <random>

#include "spindle/wire.hpp"

using namespace spindle::wire;
using spindle::Bytes;

TEST_SUITE("wire") {
  TEST_CASE("layout is byte-exact") {
    Frame f{Opcode::call, 0x0102030405060708ull, Bytes{0xDE, 0xAD}};
    Bytes e = encode(f);
    REQUIRE(e.size() == 4 + 9 + 2);
    // length = opcode + task_id + payload = 11, little-endian
    CHECK(e[0] == 11);
    CHECK(e[1] == 0);
    CHECK(e[2] == 0);
    CHECK(e[3] == 0);
    CHECK(e[4] == 0);  // opcode call
    CHECK(e[5] == 0x08);
    CHECK(e[12] == 0x01);
    CHECK(e[13] == 0xDE);
    CHECK(e[14] == 0xAD);
  }

  TEST_CASE("decode needs a whole frame") {
    Frame f{Opcode::result, 7, Bytes{1, 2, 3}};
    Bytes e = encode(f);
    std::size_t consumed = 0;
    for (std::size_t n = 0; n < e.size(); ++n) {
      auto part = decode(std::span<const std::uint8_t>(e.data(), n), &consumed);
      CHECK_FALSE(part.has_value());
    }
    auto whole = decode(std::span<const std::uint8_t>(e), &consumed);
    REQUIRE(whole.has_value());
    CHECK(consumed == e.size());
    CHECK(*whole == f);
  }

  TEST_CASE("unknown opcode is a protocol error") {
    Frame f{Opcode::shutdown, 0, {}};
    Bytes e = encode(f);
    e[4] = 9;
    std::size_t consumed = 0;
    CHECK_THROWS_AS(decode(std::span<const std::uint8_t>(e), &consumed),
                    spindle::ProtocolError);
  }

  TEST_CASE("oversized length is rejected") {
    Bytes e = {0xff, 0xff, 0xff, 0xff, 0, 0, 0, 0};
    std::size_t consumed = 0;
    CHECK_THROWS_AS(decode(std::span<const std::uint8_t>(e), &consumed),
                    spindle::ProtocolError);
  }

  TEST_CASE("encode/decode round trip over random frames") {
    std::mt19937_64 rng(20240901);
    for (int i = 0; i < 2000; ++i) {
      Frame f;
      f.opcode = static_cast<Opcode>(rng() % 4);
      f.task_id = rng();
      // log-uniform payload size, up to 1 MiB here; the acceptance suite
      // pushes to 16 MiB
      std::size_t bits = rng() % 21;
      std::size_t len = static_cast<std::size_t>(rng() % ((1ull << bits) + 1));
      f.payload.resize(len);
      for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng());
      Bytes e = encode(f);
      std::size_t consumed = 0;
      auto d = decode(std::span<const std::uint8_t>(e), &consumed);
      REQUIRE(d.has_value());
      REQUIRE(consumed == e.size());
      REQUIRE(*d == f);
    }
  }

  TEST_CASE("call payload carries the function name") {
    Bytes args{9, 8, 7};
    Bytes p = encode_call_payload("demux", std::span<const std::uint8_t>(args));
    auto [name, got] = decode_call_payload(std::span<const std::uint8_t>(p));
    CHECK(name == "demux");
    CHECK(got == args);
  }
}
