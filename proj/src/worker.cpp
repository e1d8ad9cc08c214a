#include "phub/worker.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include "phub/error.hpp"

namespace phub {

std::string_view to_string(WorkerMode m) { return m == WorkerMode::kLogReg ? "logreg" : "zero"; }

WorkerMode parse_worker_mode(std::string_view text) {
  if (text == "logreg") return WorkerMode::kLogReg;
  if (text == "zero") return WorkerMode::kZeroCompute;
  throw Error(ErrorCode::kInvalidConfig, "unknown worker mode '" + std::string(text) + "'");
}

namespace {

class Lcg {
 public:
  explicit Lcg(std::uint64_t seed) : state_(seed) {}

  float next_unit() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    const auto bits = static_cast<std::uint32_t>(state_ >> 40);
    return static_cast<float>(bits) / 8388608.0f - 1.0f;
  }

 private:
  std::uint64_t state_;
};

float dot(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  for (std::size_t j = 0; j < a.size(); ++j) acc += a[j] * b[j];
  return acc;
}

}  // namespace

SyntheticDataset synthetic_dataset(std::uint64_t seed, std::size_t samples, std::size_t dim) {
  if (samples == 0 || dim == 0) throw Error(ErrorCode::kInvalidConfig, "dataset needs samples and dim >= 1");
  SyntheticDataset d;
  d.seed = seed;
  d.samples = samples;
  d.dim = dim;
  Lcg rng(seed);
  d.hyperplane.resize(dim);
  for (auto& w : d.hyperplane) w = rng.next_unit();
  d.features.resize(samples * dim);
  d.labels.resize(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    auto x = std::span(d.features).subspan(i * dim, dim);
    for (auto& v : x) v = rng.next_unit();
    d.labels[i] = dot(x, d.hyperplane) > 0.0f ? 1.0f : 0.0f;
  }
  return d;
}

DatasetView view(const SyntheticDataset& d) { return {d.features, d.labels, d.dim}; }

DatasetView worker_slice(const SyntheticDataset& d, std::uint32_t worker, std::uint32_t workers) {
  if (workers == 0 || worker >= workers || d.samples % workers != 0) {
    throw Error(ErrorCode::kInvalidConfig, "worker count must divide the sample count");
  }
  const std::size_t per = d.samples / workers;
  return {std::span(d.features).subspan(worker * per * d.dim, per * d.dim),
          std::span(d.labels).subspan(worker * per, per), d.dim};
}

float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

std::vector<float> logreg_gradient(std::span<const float> weights, const DatasetView& batch) {
  if (batch.samples() == 0) throw Error(ErrorCode::kInvalidBatch, "empty batch");
  if (weights.size() != batch.dim) throw Error(ErrorCode::kInvalidBatch, "weight length differs from feature dim");
  std::vector<float> grad(batch.dim, 0.0f);
  for (std::size_t i = 0; i < batch.samples(); ++i) {
    const auto x = batch.features.subspan(i * batch.dim, batch.dim);
    const float err = sigmoid(dot(weights, x)) - batch.labels[i];
    for (std::size_t j = 0; j < batch.dim; ++j) grad[j] += err * x[j];
  }
  const auto n = static_cast<float>(batch.samples());
  for (auto& g : grad) g /= n;
  return grad;
}

double logistic_loss(std::span<const float> weights, const DatasetView& data) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.samples(); ++i) {
    const auto x = data.features.subspan(i * data.dim, data.dim);
    double z = 0.0;
    for (std::size_t j = 0; j < data.dim; ++j) z += static_cast<double>(weights[j]) * x[j];
    // log(1 + e^z) - y z, computed stably.
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += softplus - data.labels[i] * z;
  }
  return total / static_cast<double>(data.samples());
}

float zero_compute_value(std::uint32_t iteration) { return static_cast<float>(iteration % 7) * 1e-3f; }

std::vector<std::vector<float>> zero_compute_gradients(std::span<const ChunkDescriptor> chunks,
                                                       std::uint32_t iteration) {
  std::vector<std::vector<float>> out;
  out.reserve(chunks.size());
  const float v = zero_compute_value(iteration);
  for (const auto& c : chunks) out.emplace_back(c.element_count, v);
  return out;
}

ModelSpec logreg_model_spec(std::size_t dim) {
  const auto sizes = split_evenly(dim, std::min<std::size_t>(4, dim));
  return build_model_spec(sizes);
}

void validate(const WorkerConfig& cfg) {
  if (cfg.worker_count == 0 || cfg.worker_id >= cfg.worker_count) {
    throw Error(ErrorCode::kInvalidConfig, "worker id must be below worker count");
  }
  if (cfg.worker_count > 65536) throw Error(ErrorCode::kInvalidConfig, "worker ids are 16-bit");
  if (cfg.spec.keys.empty()) throw Error(ErrorCode::kInvalidSpec, "worker has no model spec");
  if (cfg.mode == WorkerMode::kLogReg) {
    if (cfg.samples == 0 || cfg.dim == 0) throw Error(ErrorCode::kInvalidConfig, "logreg needs samples and dim");
    if (cfg.samples % cfg.worker_count != 0) {
      throw Error(ErrorCode::kInvalidConfig, "worker count must divide the sample count");
    }
    if (cfg.spec.total_elements() != cfg.dim) {
      throw Error(ErrorCode::kInvalidSpec, "logreg model must hold exactly dim weights");
    }
  }
}

WorkerClient::WorkerClient(WorkerConfig cfg) : cfg_(std::move(cfg)), mirror_(cfg_.spec) {
  validate(cfg_);
  if (cfg_.mode == WorkerMode::kLogReg) data_ = synthetic_dataset(cfg_.seed, cfg_.samples, cfg_.dim);
  tables_.resize(std::max<std::size_t>(cfg_.connect.size(), 1));
  std::uint64_t off = 0;
  for (const auto& k : cfg_.spec.keys) {
    key_flat_offset_.push_back(off);
    off += k.element_count;
  }
}

void WorkerClient::fail(std::string reason) {
  if (failure_.empty()) failure_ = std::move(reason);
}

Message WorkerClient::header(MsgType type, std::uint32_t iteration) const {
  Message m;
  m.type = type;
  m.worker_id = static_cast<std::uint16_t>(cfg_.worker_id);
  m.iteration = iteration;
  return m;
}

std::vector<WorkerOutbound> WorkerClient::start() {
  std::vector<WorkerOutbound> out;
  Message reg = header(MsgType::kRegister, 0);
  reg.payload = encode_register({spec_hash(cfg_.spec), cfg_.worker_count});
  for (std::size_t c = 0; c < tables_.size(); ++c) out.push_back({c, reg});
  return out;
}

std::vector<WorkerOutbound> WorkerClient::on_frame(std::size_t conn, const Message& m) {
  std::vector<WorkerOutbound> out;
  if (failed() || done_) return out;
  try {
    switch (m.type) {
      case MsgType::kRegisterAck: handle_ack(conn, m, out); break;
      case MsgType::kModelChunk: handle_model(m, out); break;
      case MsgType::kError: fail("server error: " + error_reason(m)); break;
      default:
        throw Error(ErrorCode::kProtocol, "unexpected " + std::string(to_string(m.type)) + " from server");
    }
  } catch (const Error& e) {
    fail(e.what());
    out.clear();
  }
  return out;
}

void WorkerClient::handle_ack(std::size_t conn, const Message& m, std::vector<WorkerOutbound>& out) {
  if (conn >= tables_.size() || tables_[conn]) throw Error(ErrorCode::kProtocol, "unexpected REGISTER_ACK");
  auto table = decode_assignment_table(m.payload);
  std::vector<std::uint64_t> expected;
  for (const auto& k : cfg_.spec.keys) expected.push_back(k.element_count);
  if (table.key_element_counts != expected) throw Error(ErrorCode::kProtocol, "server model layout differs");
  if (table.worker_count != cfg_.worker_count) throw Error(ErrorCode::kProtocol, "server worker count differs");

  if (chunks_.empty()) {
    chunks_ = partition_model(cfg_.spec, table.chunk_bytes);
    key_first_chunk_.assign(cfg_.spec.keys.size() + 1, chunks_.size());
    for (std::size_t i = chunks_.size(); i-- > 0;) key_first_chunk_[chunks_[i].key_id] = i;
    received_.assign(chunks_.size(), false);
  } else if (partition_model(cfg_.spec, table.chunk_bytes) != chunks_) {
    throw Error(ErrorCode::kProtocol, "servers disagree on chunk size");
  }
  if (table.chunk_endpoint.size() != chunks_.size()) {
    throw Error(ErrorCode::kProtocol, "assignment table does not cover the model");
  }
  tables_[conn] = std::move(table);

  if (++acks_ == tables_.size()) {
    routes_.assign(chunks_.size(), tables_.size());
    for (std::size_t c = 0; c < tables_.size(); ++c) {
      const auto& t = *tables_[c];
      for (std::size_t k = 0; k < chunks_.size(); ++k) {
        if (t.chunk_endpoint[k] != t.local_endpoint) continue;
        if (routes_[k] != tables_.size()) throw Error(ErrorCode::kProtocol, "chunk served by two connections");
        routes_[k] = c;
      }
    }
    if (std::find(routes_.begin(), routes_.end(), tables_.size()) != routes_.end()) {
      throw Error(ErrorCode::kProtocol, "some chunks are served by no connection");
    }
    maybe_advance(out);
  }
}

void WorkerClient::handle_model(const Message& m, std::vector<WorkerOutbound>& out) {
  if (chunks_.empty()) throw Error(ErrorCode::kProtocol, "MODEL_CHUNK before REGISTER_ACK");
  if (m.iteration != expected_) {
    throw Error(ErrorCode::kProtocol, "MODEL_CHUNK for version " + std::to_string(m.iteration) + ", expected " +
                                          std::to_string(expected_));
  }
  if (m.key_id >= cfg_.spec.keys.size() ||
      m.chunk_index >= key_first_chunk_[m.key_id + 1] - key_first_chunk_[m.key_id]) {
    throw Error(ErrorCode::kProtocol, "MODEL_CHUNK for unknown chunk");
  }
  const std::size_t k = key_first_chunk_[m.key_id] + m.chunk_index;
  if (received_[k]) throw Error(ErrorCode::kProtocol, "duplicate MODEL_CHUNK");
  payload_to_floats(m.payload, mirror_.chunk(chunks_[k]));
  received_[k] = true;
  ++received_count_;
  if (expected_ > 0) {
    auto& c = counters_[expected_ - 1];
    c.model_payload_bytes += m.payload.size();
    c.header_bytes += kHeaderBytes;
  }
  maybe_advance(out);
}

void WorkerClient::maybe_advance(std::vector<WorkerOutbound>& out) {
  if (acks_ != tables_.size() || received_count_ != chunks_.size()) return;
  const std::uint32_t version = expected_;
  if (version > 0) {
    counters_[version - 1].wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - iteration_start_).count();
  }
  completed_ = version;
  mirror_.iteration = version;
  if (cfg_.track_loss && data_) losses_.push_back(logistic_loss(mirror_.flatten(), view(*data_)));
  if (on_model) on_model(version, mirror_);
  if (version == cfg_.iterations) {
    for (std::size_t c = 0; c < tables_.size(); ++c) out.push_back({c, header(MsgType::kFin, version)});
    done_ = true;
    return;
  }
  std::fill(received_.begin(), received_.end(), false);
  received_count_ = 0;
  iteration_start_ = std::chrono::steady_clock::now();
  push_gradients(out);
  expected_ = version + 1;
}

void WorkerClient::push_gradients(std::vector<WorkerOutbound>& out) {
  const std::uint32_t t = expected_;
  counters_.resize(t + 1);
  auto& counters = counters_[t];

  std::vector<float> grad;
  if (cfg_.mode == WorkerMode::kLogReg) {
    const auto w = mirror_.flatten();
    grad = logreg_gradient(w, worker_slice(*data_, cfg_.worker_id, cfg_.worker_count));
  }
  std::vector<float> constant;
  if (cfg_.mode == WorkerMode::kZeroCompute) {
    std::uint64_t largest = 0;
    for (const auto& c : chunks_) largest = std::max(largest, c.element_count);
    constant.assign(largest, zero_compute_value(t));
  }

  for (std::size_t k = 0; k < chunks_.size(); ++k) {
    const auto& c = chunks_[k];
    Message push = header(MsgType::kPushGrad, t);
    push.key_id = c.key_id;
    push.chunk_index = c.chunk_index;
    if (cfg_.mode == WorkerMode::kLogReg) {
      push.payload = floats_to_payload(
          std::span(grad).subspan(key_flat_offset_[c.key_id] + c.element_offset, c.element_count));
    } else {
      push.payload = floats_to_payload(std::span(constant).first(c.element_count));
    }
    counters.push_payload_bytes += push.payload.size();
    counters.header_bytes += kHeaderBytes;
    out.push_back({routes_[k], std::move(push)});
  }
}

WorkerResult run_worker(WorkerConfig cfg, Transport& transport,
                        std::function<void(std::uint32_t, const ModelStore&)> on_model) {
  WorkerResult result;
  WorkerClient client(cfg);
  client.on_model = std::move(on_model);

  std::vector<std::unique_ptr<Connection>> conns;
  try {
    for (const auto& address : cfg.connect) conns.push_back(transport.connect(address));
  } catch (const Error& e) {
    result.status = 1;
    result.failure = e.what();
    return result;
  }

  struct Event {
    std::size_t conn;
    std::optional<Message> message;  // nullopt: connection closed
    std::string error;
  };
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<Event> events;
  auto post = [&](Event e) {
    {
      std::lock_guard lock(mutex);
      events.push_back(std::move(e));
    }
    ready.notify_one();
  };

  std::vector<std::thread> readers;
  for (std::size_t c = 0; c < conns.size(); ++c) {
    readers.emplace_back([&, c] {
      FrameReader frames;
      Bytes buf;
      for (;;) {
        buf.clear();
        if (conns[c]->recv_some(buf, true) == RecvStatus::kClosed) break;
        frames.feed(std::move(buf));
        try {
          while (auto m = frames.next()) post({c, std::move(*m), {}});
        } catch (const Error& e) {
          post({c, std::nullopt, e.what()});
          return;
        }
      }
      post({c, std::nullopt, {}});
    });
  }

  auto send_all = [&](std::vector<WorkerOutbound>& out) {
    for (auto& o : out) {
      try {
        conns[o.conn]->send(encode_message(o.message));
      } catch (const Error& e) {
        client.fail(e.what());
      }
    }
  };

  auto out = client.start();
  send_all(out);
  while (!client.done() && !client.failed()) {
    Event e;
    {
      std::unique_lock lock(mutex);
      ready.wait(lock, [&] { return !events.empty(); });
      e = std::move(events.front());
      events.pop_front();
    }
    if (!e.message) {
      client.fail(e.error.empty() ? "connection " + std::to_string(e.conn) + " closed by server" : e.error);
      break;
    }
    out = client.on_frame(e.conn, *e.message);
    send_all(out);
  }

  for (auto& c : conns) c->close();
  for (auto& t : readers) t.join();
  result.status = client.done() && !client.failed() ? 0 : 1;
  result.failure = client.failure();
  result.mirror = client.mirror();
  result.counters = client.counters();
  result.losses = client.losses();
  return result;
}

}  // namespace phub
