#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace phub {

inline constexpr std::uint32_t kWireMagic = 0x50485542;  // "PHUB"
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kHeaderBytes = 24;

enum class MsgType : std::uint8_t {
  kRegister = 1,
  kRegisterAck = 2,
  kPushGrad = 3,
  kModelChunk = 4,
  kFin = 5,
  kError = 6,
};

std::string_view to_string(MsgType type);

using Bytes = std::vector<std::uint8_t>;

// Header layout, all little-endian:
//   0  u32 magic        4  u8 version       5  u8 msg_type
//   6  u16 worker_id    8  u32 iteration   12  u32 key_id
//  16  u32 chunk_index 20  u32 payload_len 24  payload
struct Message {
  MsgType type = MsgType::kFin;
  std::uint16_t worker_id = 0;
  std::uint32_t iteration = 0;
  std::uint32_t key_id = 0;
  std::uint32_t chunk_index = 0;
  Bytes payload;

  bool operator==(const Message&) const = default;
};

Bytes encode_message(const Message& m);
void encode_message_into(const Message& m, Bytes& out);

struct DecodeResult {
  enum class Status { kOk, kNeedMoreBytes };
  Status status = Status::kNeedMoreBytes;
  Message message;
  std::size_t consumed = 0;
};

/// Decodes one frame from the front of `bytes`. Throws Error(kProtocol) on a
/// bad magic, version or type; reports kNeedMoreBytes on a partial frame.
DecodeResult decode_message(std::span<const std::uint8_t> bytes);

/// Streaming reassembly of frames from arbitrarily segmented reads.
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Takes ownership of `bytes` when nothing is buffered.
  void feed(Bytes&& bytes);
  std::optional<Message> next();
  std::size_t buffered() const { return buffer_.size() - start_; }

 private:
  Bytes buffer_;
  std::size_t start_ = 0;
};

// Float payloads are 32-bit little-endian IEEE-754.
Bytes floats_to_payload(std::span<const float> values);
std::vector<float> payload_to_floats(std::span<const std::uint8_t> payload);
void payload_to_floats(std::span<const std::uint8_t> payload, std::span<float> out);

Message make_error(std::uint16_t worker_id, std::string_view reason);
std::string error_reason(const Message& m);

struct RegisterBody {
  std::uint64_t spec_hash = 0;
  std::uint32_t worker_count = 0;

  bool operator==(const RegisterBody&) const = default;
};

Bytes encode_register(const RegisterBody& body);
RegisterBody decode_register(std::span<const std::uint8_t> payload);

inline constexpr std::uint32_t kNotServed = 0xFFFFFFFFu;

inline constexpr std::uint32_t kFlagDeterministic = 1u << 0;
inline constexpr std::uint32_t kFlagAverage = 1u << 1;

/// REGISTER_ACK body. `chunk_endpoint` holds, per chunk in partition order,
/// the ordinal of the serving endpoint on the replying server, or kNotServed
/// when another shard owns the chunk. `local_endpoint` is the ordinal of the
/// endpoint the ACK travelled on.
struct AssignmentTable {
  std::uint32_t chunk_bytes = 0;
  std::uint32_t worker_count = 0;
  float learning_rate = 0.0f;
  std::uint32_t mode_flags = 0;
  std::uint32_t local_endpoint = 0;
  std::vector<std::uint64_t> key_element_counts;
  std::vector<std::uint32_t> chunk_endpoint;
  std::vector<std::string> endpoint_addresses;

  bool operator==(const AssignmentTable&) const = default;
};

Bytes encode_assignment_table(const AssignmentTable& table);
AssignmentTable decode_assignment_table(std::span<const std::uint8_t> payload);

}  // namespace phub
