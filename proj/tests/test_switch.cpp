#include <doctest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <random>

#include "phub/error.hpp"
#include "phub/switch_emu.hpp"

using namespace phub;
using boost::multiprecision::cpp_int;

TEST_CASE("quantization rounds half to even") {
  SwitchModel m;
  m.scale = 4;
  const float v[] = {0.125f, 0.375f, -0.125f, 0.3f, -0.3f};
  CHECK(quantize(v, m) == std::vector<std::int64_t>{0, 2, 0, 1, -1});
  const std::int64_t q[] = {2, -3};
  CHECK(dequantize(q, 4) == std::vector<float>{0.5f, -0.75f});
}

TEST_CASE("quantization range accounts for the worker count") {
  SwitchModel m;  // scale 2^16, 32-bit accumulators
  const float edge[] = {32767.0f};
  CHECK_NOTHROW(quantize(edge, m, 1));
  try {
    quantize(edge, m, 2);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kQuantizationRange);
  }
  const float nan[] = {std::nanf("")};
  CHECK_THROWS_AS(quantize(nan, m), Error);
}

TEST_CASE("switch sums match a big-integer oracle") {
  SwitchModel m;
  m.accumulator_width = 32;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t packets = 1 + rng() % 8;
    const std::size_t len = 1 + rng() % 16;
    std::vector<std::vector<std::int64_t>> p(packets, std::vector<std::int64_t>(len));
    const std::int64_t span = trial % 2 ? (1ll << 31) / static_cast<std::int64_t>(packets) : (1ll << 31);
    for (auto& pk : p) {
      for (auto& v : pk) v = static_cast<std::int64_t>(rng() % (2 * span)) - span;
    }
    bool overflow = false;
    std::vector<std::int64_t> expected(len);
    for (std::size_t i = 0; i < len; ++i) {
      cpp_int acc = 0;
      for (const auto& pk : p) {
        acc += pk[i];
        if (acc > INT32_MAX || acc < INT32_MIN) overflow = true;
      }
      expected[i] = static_cast<std::int64_t>(acc);
    }
    if (overflow) {
      CHECK_THROWS_AS(switch_aggregate(p, m), Error);
    } else {
      CHECK(switch_aggregate(p, m) == expected);
    }
  }
}

TEST_CASE("overflow is detected on intermediate sums") {
  SwitchModel m;
  const std::vector<std::vector<std::int64_t>> up = {{INT32_MAX}, {1}, {-5}};
  try {
    switch_aggregate(up, m);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kSwitchOverflow);
  }
  const std::vector<std::vector<std::int64_t>> fits = {{INT32_MAX}, {-1}, {1}};
  CHECK(switch_aggregate(fits, m) == std::vector<std::int64_t>{INT32_MAX});
  const std::vector<std::vector<std::int64_t>> low = {{INT32_MIN}, {-1}};
  CHECK_THROWS_AS(switch_aggregate(low, m), Error);
  m.accumulator_width = 64;
  CHECK(switch_aggregate(up, m) == std::vector<std::int64_t>{std::int64_t{INT32_MAX} - 4});
}

TEST_CASE("packets larger than a region are rejected") {
  SwitchModel m;
  m.region_bytes = 8;
  const std::vector<std::vector<std::int64_t>> p = {{1, 2, 3}};
  CHECK_THROWS_AS(switch_aggregate(p, m), Error);
}

TEST_CASE("hierarchical reduction of a small case") {
  const auto topo = uniform_topology(2, 2);
  SwitchModel m;
  m.scale = 256;
  m.region_bytes = 8;
  const std::vector<std::vector<float>> g = {{1.0f, 0.5f, 0.25f}, {1.0f, 0.5f, 0.0f},
                                             {-1.0f, 0.5f, 0.0f}, {3.0f, 0.5f, 0.0f}};
  const auto r = hierarchical_reduce(topo, g, m, OptimizerConfig{});
  CHECK(r.aggregate == std::vector<float>{1.0f, 0.5f, 0.0625f});
  CHECK(r.traffic.worker_to_tor_bytes == 4 * 12);
  CHECK(r.traffic.tor_to_root_bytes == 2 * 12);
  CHECK(r.traffic.root_to_tor_bytes == 2 * 12);
  CHECK(r.traffic.fragments == 4);
  CHECK(r.traffic.storage_waves == 2);
}

TEST_CASE("hierarchical traffic is racks over workers of flat traffic") {
  const auto topo = uniform_topology(2, 4);
  const auto c = traffic_compare(topo, 1 << 20, 8);
  CHECK(c.hier_cross_rack_bytes * 4 == c.flat_cross_rack_bytes);
  CHECK_THROWS_AS(traffic_compare(topo, 1 << 20, 7), Error);
}

TEST_CASE("switch and topology validation") {
  SwitchModel m;
  m.scale = 3;
  CHECK_THROWS_AS(validate(m), Error);
  m = SwitchModel{};
  m.accumulator_width = 16;
  CHECK_THROWS_AS(validate(m), Error);
  Topology t;
  t.racks = {{0, 1}, {1}};
  CHECK_THROWS_AS(validate(t), Error);
  CHECK_THROWS_AS(uniform_topology(0, 3), Error);
}
