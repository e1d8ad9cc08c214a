#include <doctest.h>

#include <cstring>
#include <limits>
#include <random>

#include "phub/error.hpp"
#include "phub/wire.hpp"

using namespace phub;

TEST_CASE("header layout is little-endian and 24 bytes") {
  Message m;
  m.type = MsgType::kPushGrad;
  m.worker_id = 0x0102;
  m.iteration = 0x03040506;
  m.key_id = 7;
  m.chunk_index = 9;
  m.payload = {0xAA, 0xBB};
  const Bytes b = encode_message(m);
  REQUIRE(b.size() == 26);
  const Bytes head(b.begin(), b.begin() + 24);
  CHECK(head == Bytes{0x42, 0x55, 0x48, 0x50, 1, 3, 0x02, 0x01, 0x06, 0x05, 0x04, 0x03,
                      7, 0, 0, 0, 9, 0, 0, 0, 2, 0, 0, 0});
}

TEST_CASE("decode reports partial frames and rejects bad headers") {
  Message m;
  m.type = MsgType::kModelChunk;
  m.payload = Bytes(10, 1);
  Bytes b = encode_message(m);
  for (std::size_t n = 0; n < b.size(); ++n) {
    CHECK(decode_message(std::span(b).first(n)).status == DecodeResult::Status::kNeedMoreBytes);
  }
  const auto ok = decode_message(b);
  CHECK(ok.status == DecodeResult::Status::kOk);
  CHECK(ok.consumed == b.size());
  CHECK(ok.message == m);

  auto bad = b;
  bad[0] ^= 1;
  CHECK_THROWS_AS(decode_message(bad), Error);
  bad = b;
  bad[4] = 2;
  CHECK_THROWS_AS(decode_message(bad), Error);
  for (std::uint8_t t : {0, 7, 255}) {
    bad = b;
    bad[5] = t;
    CHECK_THROWS_AS(decode_message(bad), Error);
  }
}

TEST_CASE("frame reader reassembles byte-at-a-time input") {
  std::vector<Message> sent;
  Bytes stream;
  for (std::uint32_t i = 0; i < 5; ++i) {
    Message m;
    m.type = MsgType::kPushGrad;
    m.iteration = i;
    m.payload = Bytes(i * 3, static_cast<std::uint8_t>(i));
    encode_message_into(m, stream);
    sent.push_back(m);
  }
  FrameReader r;
  std::vector<Message> got;
  for (auto byte : stream) {
    r.feed(std::span(&byte, 1));
    while (auto m = r.next()) got.push_back(*m);
  }
  CHECK(got == sent);
  CHECK(r.buffered() == 0);
}

TEST_CASE("float payloads round-trip bit patterns") {
  const std::vector<float> v = {0.0f, -0.0f, 1.0f, -3.5e-38f, 1e38f, std::numeric_limits<float>::denorm_min()};
  const Bytes b = floats_to_payload(v);
  REQUIRE(b.size() == 24);
  CHECK(b[8] == 0x00);
  CHECK(b[11] == 0x3F);
  const auto back = payload_to_floats(b);
  REQUIRE(back.size() == v.size());
  CHECK(std::memcmp(back.data(), v.data(), 24) == 0);
  CHECK_THROWS_AS(payload_to_floats(Bytes(5)), Error);
}

TEST_CASE("register and assignment bodies round-trip") {
  const RegisterBody r{0x1122334455667788ull, 4};
  CHECK(decode_register(encode_register(r)) == r);
  CHECK_THROWS_AS(decode_register(Bytes(3)), Error);

  AssignmentTable t;
  t.chunk_bytes = 1024;
  t.worker_count = 3;
  t.learning_rate = 0.25f;
  t.mode_flags = kFlagDeterministic | kFlagAverage;
  t.local_endpoint = 1;
  t.key_element_counts = {10, 300};
  t.chunk_endpoint = {0, kNotServed, 1};
  t.endpoint_addresses = {"127.0.0.1:1", "127.0.0.1:2"};
  const Bytes b = encode_assignment_table(t);
  CHECK(decode_assignment_table(b) == t);
  CHECK_THROWS_AS(decode_assignment_table(std::span(b).first(b.size() - 1)), Error);

  t.chunk_endpoint = {0, 2, 1};  // endpoint 2 does not exist
  CHECK_THROWS_AS(decode_assignment_table(encode_assignment_table(t)), Error);
}

TEST_CASE("error frames carry a reason") {
  const Message e = make_error(3, "bsp-violation");
  CHECK(e.type == MsgType::kError);
  CHECK(e.worker_id == 3);
  CHECK(error_reason(e) == "bsp-violation");
}
