#include "phub/wire.hpp"

#include <bit>
#include <cstring>

#include "phub/error.hpp"

namespace phub {

namespace {

template <typename T>
void put_le(Bytes& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

void put_f32(Bytes& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

class BodyReader {
 public:
  explicit BodyReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T read() {
    need(sizeof(T));
    T v = get_le<T>(bytes_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }

  float read_f32() { return std::bit_cast<float>(read<std::uint32_t>()); }

  std::string read_string() {
    const auto len = read<std::uint32_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw Error(ErrorCode::kProtocol, "trailing bytes in message body");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::kProtocol, "message body truncated");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string_view to_string(MsgType type) {
  switch (type) {
    case MsgType::kRegister: return "REGISTER";
    case MsgType::kRegisterAck: return "REGISTER_ACK";
    case MsgType::kPushGrad: return "PUSH_GRAD";
    case MsgType::kModelChunk: return "MODEL_CHUNK";
    case MsgType::kFin: return "FIN";
    case MsgType::kError: return "ERROR";
  }
  return "UNKNOWN";
}

void encode_message_into(const Message& m, Bytes& out) {
  out.reserve(out.size() + kHeaderBytes + m.payload.size());
  put_le<std::uint32_t>(out, kWireMagic);
  put_le<std::uint8_t>(out, kWireVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(m.type));
  put_le<std::uint16_t>(out, m.worker_id);
  put_le<std::uint32_t>(out, m.iteration);
  put_le<std::uint32_t>(out, m.key_id);
  put_le<std::uint32_t>(out, m.chunk_index);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.payload.size()));
  out.insert(out.end(), m.payload.begin(), m.payload.end());
}

Bytes encode_message(const Message& m) {
  Bytes out;
  encode_message_into(m, out);
  return out;
}

DecodeResult decode_message(std::span<const std::uint8_t> bytes) {
  DecodeResult result;
  if (bytes.size() < kHeaderBytes) return result;
  const std::uint8_t* p = bytes.data();
  const auto magic = get_le<std::uint32_t>(p);
  if (magic != kWireMagic) throw Error(ErrorCode::kProtocol, "bad magic");
  if (p[4] != kWireVersion) throw Error(ErrorCode::kProtocol, "unsupported version " + std::to_string(p[4]));
  if (p[5] < 1 || p[5] > 6) throw Error(ErrorCode::kProtocol, "unknown message type " + std::to_string(p[5]));
  const auto payload_len = get_le<std::uint32_t>(p + 20);
  if (bytes.size() - kHeaderBytes < payload_len) return result;

  Message& m = result.message;
  m.type = static_cast<MsgType>(p[5]);
  m.worker_id = get_le<std::uint16_t>(p + 6);
  m.iteration = get_le<std::uint32_t>(p + 8);
  m.key_id = get_le<std::uint32_t>(p + 12);
  m.chunk_index = get_le<std::uint32_t>(p + 16);
  m.payload.assign(p + kHeaderBytes, p + kHeaderBytes + payload_len);
  result.status = DecodeResult::Status::kOk;
  result.consumed = kHeaderBytes + payload_len;
  return result;
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
  if (start_ > 0 && start_ >= buffer_.size() / 2) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

void FrameReader::feed(Bytes&& bytes) {
  if (start_ == buffer_.size()) {
    buffer_ = std::move(bytes);
    start_ = 0;
    bytes.clear();
    return;
  }
  feed(std::span<const std::uint8_t>(bytes));
  bytes.clear();
}

std::optional<Message> FrameReader::next() {
  auto result = decode_message(std::span(buffer_).subspan(start_));
  if (result.status != DecodeResult::Status::kOk) return std::nullopt;
  start_ += result.consumed;
  if (start_ == buffer_.size()) {
    buffer_.clear();
    start_ = 0;
  }
  return std::move(result.message);
}

Bytes floats_to_payload(std::span<const float> values) {
  Bytes out(values.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), values.data(), out.size());
  } else {
    out.clear();
    for (float v : values) put_f32(out, v);
  }
  return out;
}

void payload_to_floats(std::span<const std::uint8_t> payload, std::span<float> out) {
  if (payload.size() != out.size() * sizeof(float)) {
    throw Error(ErrorCode::kProtocol, "float payload of " + std::to_string(payload.size()) +
                                          " bytes does not match " + std::to_string(out.size()) + " elements");
  }
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), payload.data(), payload.size());
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload.data() + 4 * i));
    }
  }
}

std::vector<float> payload_to_floats(std::span<const std::uint8_t> payload) {
  if (payload.size() % sizeof(float) != 0) {
    throw Error(ErrorCode::kProtocol, "float payload length is not a multiple of 4");
  }
  std::vector<float> out(payload.size() / sizeof(float));
  payload_to_floats(payload, out);
  return out;
}

Message make_error(std::uint16_t worker_id, std::string_view reason) {
  Message m;
  m.type = MsgType::kError;
  m.worker_id = worker_id;
  m.payload.assign(reason.begin(), reason.end());
  return m;
}

std::string error_reason(const Message& m) { return std::string(m.payload.begin(), m.payload.end()); }

Bytes encode_register(const RegisterBody& body) {
  Bytes out;
  put_le<std::uint64_t>(out, body.spec_hash);
  put_le<std::uint32_t>(out, body.worker_count);
  return out;
}

RegisterBody decode_register(std::span<const std::uint8_t> payload) {
  BodyReader r(payload);
  RegisterBody body;
  body.spec_hash = r.read<std::uint64_t>();
  body.worker_count = r.read<std::uint32_t>();
  r.expect_end();
  return body;
}

Bytes encode_assignment_table(const AssignmentTable& t) {
  Bytes out;
  put_le<std::uint32_t>(out, t.chunk_bytes);
  put_le<std::uint32_t>(out, t.worker_count);
  put_f32(out, t.learning_rate);
  put_le<std::uint32_t>(out, t.mode_flags);
  put_le<std::uint32_t>(out, t.local_endpoint);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.key_element_counts.size()));
  for (auto n : t.key_element_counts) put_le<std::uint64_t>(out, n);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.chunk_endpoint.size()));
  for (auto e : t.chunk_endpoint) put_le<std::uint32_t>(out, e);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.endpoint_addresses.size()));
  for (const auto& a : t.endpoint_addresses) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.size()));
    out.insert(out.end(), a.begin(), a.end());
  }
  return out;
}

AssignmentTable decode_assignment_table(std::span<const std::uint8_t> payload) {
  BodyReader r(payload);
  AssignmentTable t;
  t.chunk_bytes = r.read<std::uint32_t>();
  t.worker_count = r.read<std::uint32_t>();
  t.learning_rate = r.read_f32();
  t.mode_flags = r.read<std::uint32_t>();
  t.local_endpoint = r.read<std::uint32_t>();
  const auto keys = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < keys; ++i) t.key_element_counts.push_back(r.read<std::uint64_t>());
  const auto chunks = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < chunks; ++i) t.chunk_endpoint.push_back(r.read<std::uint32_t>());
  const auto endpoints = r.read<std::uint32_t>();
  for (std::uint32_t i = 0; i < endpoints; ++i) t.endpoint_addresses.push_back(r.read_string());
  r.expect_end();
  for (auto e : t.chunk_endpoint) {
    if (e != kNotServed && e >= t.endpoint_addresses.size()) {
      throw Error(ErrorCode::kProtocol, "assignment table references unknown endpoint " + std::to_string(e));
    }
  }
  return t;
}

}  // namespace phub
