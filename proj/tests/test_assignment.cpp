#include <doctest.h>

#include <algorithm>
#include <random>

#include "phub/assignment.hpp"
#include "phub/error.hpp"

using namespace phub;

namespace {

std::vector<ChunkDescriptor> one_chunk_per_key(std::initializer_list<std::uint64_t> bytes) {
  std::vector<std::uint64_t> elems;
  for (auto b : bytes) elems.push_back(b / 4);
  const auto spec = build_model_spec(elems);
  std::uint64_t largest = 0;
  for (auto b : bytes) largest = std::max(largest, b);
  return partition_model(spec, largest);
}

std::vector<std::uint64_t> byte_loads(const ChunkAssignment& a) {
  std::vector<std::uint64_t> out;
  for (const auto& l : load_report(a)) out.push_back(l.byte_load);
  return out;
}

}  // namespace

TEST_CASE("longest-first greedy on two cores") {
  // 20, 16, 12, 12, 12 bytes: 20->c0, 16->c1, 12->c1 (28), 12->c0 (32), 12->c1 (40)
  const auto chunks = one_chunk_per_key({20, 16, 12, 12, 12});
  const auto a = assign_chunks(chunks, 2, 1, 1);
  CHECK(byte_loads(a) == std::vector<std::uint64_t>{32, 40});
  CHECK(a.placement(0, 0).core_shard == 0);
  CHECK(a.placement(1, 0).core_shard == 1);
  CHECK(a.placement(2, 0).core_shard == 1);
  CHECK(a.placement(3, 0).core_shard == 0);
  CHECK(a.placement(4, 0).core_shard == 1);
}

TEST_CASE("ten equal chunks on four cores") {
  const std::uint64_t elems[] = {10 * 256};
  const auto chunks = partition_model(build_model_spec(elems), 1024);
  REQUIRE(chunks.size() == 10);
  const auto a = assign_chunks(chunks, 4, 1, 1);
  std::vector<std::uint64_t> counts;
  for (const auto& l : load_report(a)) counts.push_back(l.chunk_count);
  CHECK(counts == std::vector<std::uint64_t>{3, 3, 2, 2});
}

TEST_CASE("cores bind to endpoints of their own group") {
  const std::uint64_t elems[] = {4096, 4096, 100};
  const auto chunks = partition_model(build_model_spec(elems), 1024);
  const auto a = assign_chunks(chunks, 4, 2, 4);
  CHECK(a.endpoint_of_core(0) == 0);
  CHECK(a.endpoint_of_core(1) == 1);
  CHECK(a.endpoint_of_core(2) == 2);
  CHECK(a.endpoint_of_core(3) == 3);
  const auto b = assign_chunks(chunks, 4, 2, 2);
  CHECK(b.endpoint_of_core(1) == 0);
  CHECK(b.endpoint_of_core(2) == 1);
  for (const auto& p : b.placements()) {
    CHECK(p.core_group == b.group_of_core(p.core_shard));
    CHECK(p.endpoint == p.core_group);
  }
}

TEST_CASE("invalid core, group and endpoint combinations are rejected") {
  const auto chunks = one_chunk_per_key({4});
  for (auto [c, g, e] : {std::tuple{0u, 1u, 1u}, {3u, 2u, 2u}, {4u, 2u, 3u}, {2u, 4u, 4u}, {1u, 1u, 0u}}) {
    try {
      assign_chunks(chunks, c, g, e);
      FAIL("expected throw");
    } catch (const Error& err) {
      CHECK(err.code() == ErrorCode::kInvalidConfig);
    }
  }
}

TEST_CASE("lookups of absent chunks throw") {
  const auto a = assign_chunks(one_chunk_per_key({4, 8}), 1, 1, 1);
  CHECK_THROWS_AS(a.chunk_ordinal(2, 0), Error);
  CHECK_THROWS_AS(a.chunk_ordinal(0, 1), Error);
  CHECK(endpoint_for_chunk(a, 1, 0) == 0);
}

TEST_CASE("assignment is a pure function of its inputs") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint64_t> elems(1 + rng() % 12);
    for (auto& e : elems) e = 1 + rng() % 20000;
    const auto chunks = partition_model(build_model_spec(elems), 4096);
    const auto a = assign_chunks(chunks, 6, 3, 3);
    const auto b = assign_chunks(chunks, 6, 3, 3);
    CHECK(a == b);
  }
}
