#include <doctest.h>

#include <numeric>

#include "phub/error.hpp"
#include "phub/model.hpp"

using namespace phub;

namespace {

ModelSpec spec_of(std::initializer_list<std::uint64_t> counts) {
  std::vector<std::uint64_t> v(counts);
  return build_model_spec(v);
}

}  // namespace

TEST_CASE("build_model_spec assigns dense ids and totals bytes") {
  const auto s = spec_of({10, 1, 8192});
  REQUIRE(s.key_count() == 3);
  CHECK(s.keys[2].key_id == 2);
  CHECK(s.keys[2].byte_size() == 32768);
  CHECK(s.total_bytes == (10 + 1 + 8192) * 4);
  CHECK(s.total_elements() == 8203);
}

TEST_CASE("empty keys and empty specs are rejected") {
  CHECK_THROWS_AS(spec_of({}), Error);
  try {
    spec_of({4, 0});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInvalidSpec);
  }
}

TEST_CASE("partition splits keys into 32 KB chunks without spanning keys") {
  // 20000 elements = 80000 bytes -> 32768 + 32768 + 14464
  const auto s = spec_of({20000, 100});
  const auto chunks = partition_model(s, kDefaultChunkBytes);
  REQUIRE(chunks.size() == 4);
  CHECK(chunks[0] == ChunkDescriptor{0, 0, 0, 8192, 32768});
  CHECK(chunks[1] == ChunkDescriptor{0, 1, 8192, 8192, 32768});
  CHECK(chunks[2] == ChunkDescriptor{0, 2, 16384, 3616, 14464});
  CHECK(chunks[3] == ChunkDescriptor{1, 0, 0, 100, 400});
}

TEST_CASE("partition covers every element exactly once") {
  const auto s = spec_of({1, 255, 256, 257, 5000});
  for (std::uint64_t cb : {4u, 1024u, 1028u, 32768u}) {
    const auto chunks = partition_model(s, cb);
    std::uint64_t total = 0;
    for (const auto& c : chunks) {
      CHECK(c.byte_size <= cb);
      CHECK(c.byte_size == c.element_count * 4);
      total += c.element_count;
    }
    CHECK(total == s.total_elements());
  }
}

TEST_CASE("chunk sizes must be positive multiples of the element width") {
  const auto s = spec_of({8});
  for (std::uint64_t cb : {0u, 3u, 6u}) {
    try {
      partition_model(s, cb);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kInvalidChunkSize);
    }
  }
}

TEST_CASE("spec hash distinguishes layouts") {
  CHECK(spec_hash(spec_of({4, 4})) == spec_hash(spec_of({4, 4})));
  CHECK(spec_hash(spec_of({4, 4})) != spec_hash(spec_of({8})));
  CHECK(spec_hash(spec_of({4, 5})) != spec_hash(spec_of({5, 4})));
}

TEST_CASE("split_evenly puts the remainder in the first keys") {
  CHECK(split_evenly(10, 4) == std::vector<std::uint64_t>{3, 3, 2, 2});
  CHECK(split_evenly(8, 4) == std::vector<std::uint64_t>{2, 2, 2, 2});
  CHECK_THROWS_AS(split_evenly(3, 4), Error);
}

TEST_CASE("model store exposes chunk views over keys") {
  const auto s = spec_of({6, 3});
  ModelStore m(s, 1.5f);
  const auto chunks = partition_model(s, 8);
  auto view = m.chunk(chunks[1]);
  REQUIRE(view.size() == 2);
  view[0] = 7.0f;
  CHECK(m.key(0)[2] == 7.0f);
  std::vector<float> flat(9);
  std::iota(flat.begin(), flat.end(), 0.0f);
  m.assign_flat(flat);
  CHECK(m.flatten() == flat);
  CHECK(m.key(1)[0] == 6.0f);
  CHECK_THROWS_AS(m.assign_flat(std::vector<float>(8)), Error);
}
