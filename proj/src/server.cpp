#include "phub/server.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <thread>
#include <unordered_map>

#include "phub/error.hpp"

namespace phub {

std::string_view to_string(Deployment d) {
  switch (d) {
    case Deployment::kCentral: return "central";
    case Deployment::kPBox: return "pbox";
    case Deployment::kShardMember: return "shard";
  }
  return "unknown";
}

Deployment parse_deployment(std::string_view text) {
  if (text == "central") return Deployment::kCentral;
  if (text == "pbox") return Deployment::kPBox;
  if (text == "shard") return Deployment::kShardMember;
  throw Error(ErrorCode::kInvalidConfig, "unknown deployment '" + std::string(text) + "'");
}

AggregationMode parse_aggregation_mode(std::string_view text) {
  if (text == "fast") return AggregationMode::kFast;
  if (text == "det") return AggregationMode::kDeterministic;
  throw Error(ErrorCode::kInvalidConfig, "unknown aggregation mode '" + std::string(text) + "'");
}

void validate(const ServerConfig& cfg, const ModelSpec& spec) {
  if (cfg.worker_count == 0) throw Error(ErrorCode::kInvalidConfig, "worker count must be at least 1");
  if (cfg.worker_count > 65536) throw Error(ErrorCode::kInvalidConfig, "worker ids are 16-bit");
  if (cfg.listen.empty()) throw Error(ErrorCode::kInvalidConfig, "need at least one listen address");
  if (cfg.chunk_bytes > 0xFFFFFFFFull) throw Error(ErrorCode::kInvalidChunkSize, "chunk size exceeds 32 bits");
  validate(cfg.optimizer);
  const std::uint32_t endpoints = cfg.endpoint_count();
  if (cfg.group_count < 1 || cfg.core_count < cfg.group_count || cfg.core_count % cfg.group_count != 0 ||
      endpoints % cfg.group_count != 0) {
    throw Error(ErrorCode::kInvalidConfig, std::to_string(cfg.core_count) + " cores and " +
                                               std::to_string(endpoints) + " endpoints do not split into " +
                                               std::to_string(cfg.group_count) + " equal groups");
  }
  if (cfg.deployment == Deployment::kShardMember) {
    if (cfg.shard_count < 1 || cfg.shard_index >= cfg.shard_count) {
      throw Error(ErrorCode::kInvalidConfig, "shard index must be below shard count");
    }
  } else if (cfg.shard_count != 1 || cfg.shard_index != 0) {
    throw Error(ErrorCode::kInvalidConfig, "shard index/count only apply to shard deployment");
  }
  if (spec.keys.empty()) throw Error(ErrorCode::kInvalidSpec, "model has no keys");
}

namespace {

using KeyRanges = std::vector<std::vector<std::uint32_t>>;

KeyRanges ranges_from_cuts(const std::vector<std::size_t>& cuts) {
  KeyRanges shards(cuts.size() - 1);
  for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
    for (std::size_t k = cuts[s]; k < cuts[s + 1]; ++k) shards[s].push_back(static_cast<std::uint32_t>(k));
  }
  return shards;
}

std::uint64_t spread(const std::vector<std::uint64_t>& prefix, const std::vector<std::size_t>& cuts) {
  std::uint64_t hi = 0;
  std::uint64_t lo = UINT64_MAX;
  for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
    const std::uint64_t b = prefix[cuts[s + 1]] - prefix[cuts[s]];
    hi = std::max(hi, b);
    lo = std::min(lo, b);
  }
  return hi - lo;
}

// Greedy in key order: each shard aims at an equal share of the bytes not
// yet placed, and closes once adding the next key would move it further
// from that target.
std::vector<std::size_t> greedy_cuts(const std::vector<std::uint64_t>& prefix, std::uint32_t shard_count) {
  const std::size_t keys = prefix.size() - 1;
  std::vector<std::size_t> cuts = {0};
  std::size_t k = 0;
  for (std::uint32_t s = 0; s + 1 < shard_count; ++s) {
    const std::uint32_t shards_left = shard_count - s;
    const std::uint64_t remaining = prefix[keys] - prefix[k];
    auto distance = [&](std::uint64_t b) {
      const std::uint64_t scaled = shards_left * b;
      return scaled > remaining ? scaled - remaining : remaining - scaled;
    };
    ++k;
    while (keys - k > shards_left - 1 &&
           distance(prefix[k + 1] - prefix[cuts.back()]) < distance(prefix[k] - prefix[cuts.back()])) {
      ++k;
    }
    cuts.push_back(k);
  }
  cuts.push_back(keys);
  return cuts;
}

// Contiguous split with every shard in [low, low + width], or empty.
std::vector<std::size_t> window_cuts(const std::vector<std::uint64_t>& prefix, std::uint32_t shard_count,
                                     std::uint64_t low, std::uint64_t width) {
  const std::size_t keys = prefix.size() - 1;
  // reach[j][i]: keys [0, i) split into j shards within the window.
  std::vector<std::vector<char>> reach(shard_count + 1, std::vector<char>(keys + 1, 0));
  reach[0][0] = 1;
  std::vector<std::size_t> count(keys + 2);
  for (std::uint32_t j = 1; j <= shard_count; ++j) {
    for (std::size_t i = 0; i <= keys; ++i) count[i + 1] = count[i] + reach[j - 1][i];
    std::size_t first = 0;
    std::size_t last = 0;  // candidate starts a in [first, last)
    for (std::size_t i = 1; i <= keys; ++i) {
      while (last < i && prefix[i] - prefix[last] >= low) ++last;
      while (first < last && prefix[i] - prefix[first] > low + width) ++first;
      reach[j][i] = count[last] > count[first];
    }
  }
  if (!reach[shard_count][keys]) return {};
  std::vector<std::size_t> cuts(shard_count + 1);
  cuts[shard_count] = keys;
  for (std::uint32_t j = shard_count; j > 0; --j) {
    const std::size_t end = cuts[j];
    std::size_t a = end;
    while (a-- > 0) {
      const std::uint64_t b = prefix[end] - prefix[a];
      if (b > low + width) break;
      if (b >= low && reach[j - 1][a]) break;
    }
    cuts[j - 1] = a;
  }
  return cuts;
}

}  // namespace

std::vector<std::vector<std::uint32_t>> shard_keyspace(const ModelSpec& spec, std::uint32_t shard_count) {
  if (shard_count < 1) throw Error(ErrorCode::kInvalidConfig, "shard count must be at least 1");
  if (shard_count > spec.keys.size()) {
    throw Error(ErrorCode::kInvalidConfig, std::to_string(shard_count) + " shards for only " +
                                               std::to_string(spec.keys.size()) + " keys");
  }
  const std::size_t keys = spec.keys.size();
  std::vector<std::uint64_t> prefix(keys + 1, 0);
  std::uint64_t max_key = 0;
  for (std::size_t k = 0; k < keys; ++k) {
    prefix[k + 1] = prefix[k] + spec.keys[k].byte_size();
    max_key = std::max(max_key, spec.keys[k].byte_size());
  }
  auto cuts = greedy_cuts(prefix, shard_count);
  if (spread(prefix, cuts) <= max_key) return ranges_from_cuts(cuts);

  // The smallest shard of a split within the bound is a contiguous key range
  // holding between average - max_key and average bytes; try each such size
  // as the window floor, largest first.
  const std::uint64_t average = prefix[keys] / shard_count;
  const std::uint64_t floor = average > max_key ? average - max_key : 1;
  std::vector<std::uint64_t> lows;
  for (std::size_t a = 0; a < keys; ++a) {
    for (std::size_t b = a + 1; b <= keys; ++b) {
      const std::uint64_t sum = prefix[b] - prefix[a];
      if (sum > average) break;
      if (sum >= floor) lows.push_back(sum);
    }
  }
  std::sort(lows.begin(), lows.end(), std::greater<>());
  lows.erase(std::unique(lows.begin(), lows.end()), lows.end());
  for (auto low : lows) {
    auto window = window_cuts(prefix, shard_count, low, max_key);
    if (!window.empty()) return ranges_from_cuts(window);
  }
  return ranges_from_cuts(cuts);
}

IterationCounters& IterationCounters::operator+=(const IterationCounters& o) {
  push_payload_bytes += o.push_payload_bytes;
  bcast_payload_bytes += o.bcast_payload_bytes;
  header_bytes += o.header_bytes;
  chunks_completed += o.chunks_completed;
  return *this;
}

void ServerStatus::fail(std::string reason) {
  std::lock_guard lock(mutex_);
  if (!failed_.load(std::memory_order_relaxed)) {
    reason_ = std::move(reason);
    failed_.store(true, std::memory_order_release);
  }
}

std::string ServerStatus::reason() const {
  std::lock_guard lock(mutex_);
  return reason_;
}

ConnectionRegistry::ConnectionRegistry(std::uint32_t worker_count, std::uint32_t endpoint_count)
    : workers_(worker_count), endpoints_(endpoint_count), table_(std::size_t{worker_count} * endpoint_count, kNoConn) {}

bool ConnectionRegistry::worker_complete(std::uint32_t worker) const {
  for (std::uint32_t e = 0; e < endpoints_; ++e) {
    if (at(worker, e) == kNoConn) return false;
  }
  return true;
}

struct ServerShared {
  ServerShared(ModelSpec s, ServerConfig c, ModelStore initial)
      : spec(std::move(s)), cfg(std::move(c)), registry(cfg.worker_count, cfg.endpoint_count()) {
    validate(cfg, spec);
    all_chunks = partition_model(spec, cfg.chunk_bytes);
    key_first.resize(spec.keys.size() + 1);
    for (std::size_t i = all_chunks.size(); i-- > 0;) key_first[all_chunks[i].key_id] = i;
    key_first.back() = all_chunks.size();

    std::vector<bool> key_owned(spec.keys.size(), true);
    if (cfg.deployment == Deployment::kShardMember) {
      std::fill(key_owned.begin(), key_owned.end(), false);
      const auto shards = shard_keyspace(spec, cfg.shard_count);
      for (auto k : shards[cfg.shard_index]) key_owned[k] = true;
    }
    std::vector<ChunkDescriptor> owned_chunks;
    for (std::size_t i = 0; i < all_chunks.size(); ++i) {
      if (key_owned[all_chunks[i].key_id]) {
        owned.push_back(i);
        owned_chunks.push_back(all_chunks[i]);
      }
    }
    assignment = assign_chunks(owned_chunks, cfg.core_count, cfg.group_count, cfg.endpoint_count());
    serving.assign(all_chunks.size(), kNotServed);
    for (std::size_t j = 0; j < owned.size(); ++j) {
      serving[owned[j]] = cfg.deployment == Deployment::kCentral ? 0 : assignment.placements()[j].endpoint;
      owned_bytes += owned_chunks[j].byte_size;
    }

    if (initial.key_count() == 0) {
      store = ModelStore(spec);
    } else {
      ModelStore probe(spec);
      for (std::uint32_t k = 0; k < spec.keys.size(); ++k) {
        if (k >= initial.key_count() || initial.key(k).size() != probe.key(k).size()) {
          throw Error(ErrorCode::kInvalidSpec, "initial model does not match spec");
        }
      }
      store = std::move(initial);
    }
  }

  std::optional<std::size_t> full_ordinal(std::uint32_t key_id, std::uint32_t chunk_index) const {
    if (key_id >= spec.keys.size()) return std::nullopt;
    if (chunk_index >= key_first[key_id + 1] - key_first[key_id]) return std::nullopt;
    return key_first[key_id] + chunk_index;
  }

  AssignmentTable table_for(std::uint32_t endpoint) const {
    AssignmentTable t;
    t.chunk_bytes = static_cast<std::uint32_t>(cfg.chunk_bytes);
    t.worker_count = cfg.worker_count;
    t.learning_rate = cfg.optimizer.learning_rate;
    t.mode_flags = (cfg.mode == AggregationMode::kDeterministic ? kFlagDeterministic : 0u) |
                   (cfg.optimizer.average_gradients ? kFlagAverage : 0u);
    t.local_endpoint = endpoint;
    for (const auto& k : spec.keys) t.key_element_counts.push_back(k.element_count);
    t.chunk_endpoint = serving;
    t.endpoint_addresses = cfg.listen;
    return t;
  }

  ModelSpec spec;
  ServerConfig cfg;
  std::vector<ChunkDescriptor> all_chunks;
  std::vector<std::size_t> key_first;
  std::vector<std::size_t> owned;
  ChunkAssignment assignment;
  std::vector<std::uint32_t> serving;
  std::uint64_t owned_bytes = 0;
  ModelStore store;
  ConnectionRegistry registry;
  ServerStatus status;

  // Control plane state, serialized by control_mutex.
  std::mutex control_mutex;
  std::unordered_map<ConnId, std::pair<std::uint32_t, std::uint32_t>> conn_owner;
  std::set<ConnId> fins;
  std::uint32_t registered_workers = 0;
  std::uint64_t registration_bytes = 0;
  std::atomic<bool> finished{false};
};

namespace {

Outbound reject(ServerShared& shared, ConnId conn, std::uint16_t worker, const std::string& reason,
                const std::string& detail, bool fatal = true) {
  if (fatal) shared.status.fail(reason + ": " + detail);
  return {conn, make_error(worker, reason)};
}

}  // namespace

CoreShard::CoreShard(std::uint32_t core, ServerShared& shared) : core_(core), shared_(shared) {
  const auto& a = shared_.assignment;
  buffer_of_ordinal_.assign(a.chunks().size(), static_cast<std::size_t>(-1));
  for (std::size_t j = 0; j < a.chunks().size(); ++j) {
    if (a.placements()[j].core_shard != core_) continue;
    buffer_of_ordinal_[j] = buffers_.size();
    buffers_.emplace_back(a.chunks()[j], shared_.cfg.worker_count, shared_.cfg.mode, 0);
  }
}

IterationCounters& CoreShard::counters_for(std::uint32_t iteration) {
  if (counters_.size() <= iteration) counters_.resize(iteration + 1);
  return counters_[iteration];
}

std::uint64_t CoreShard::applied_updates() const {
  std::uint64_t n = 0;
  for (const auto& b : buffers_) n += b.applied_updates();
  return n;
}

void CoreShard::on_push(ConnId from, const Message& push, std::vector<Outbound>& out) {
  const auto& cfg = shared_.cfg;
  const std::uint16_t worker = push.worker_id;
  if (!shared_.registry.sealed()) {
    out.push_back(reject(shared_, from, worker, "bsp-violation", "push before all workers registered"));
    return;
  }
  if (worker >= cfg.worker_count) {
    out.push_back(reject(shared_, from, worker, "protocol-error", "worker id out of range"));
    return;
  }
  const auto full = shared_.full_ordinal(push.key_id, push.chunk_index);
  if (!full || shared_.serving[*full] == kNotServed) {
    out.push_back(reject(shared_, from, worker, "not-owner",
                         "chunk (" + std::to_string(push.key_id) + ", " + std::to_string(push.chunk_index) +
                             ") is not owned by this server"));
    return;
  }
  const std::uint32_t endpoint = shared_.serving[*full];
  if (shared_.registry.at(worker, endpoint) != from) {
    out.push_back(reject(shared_, from, worker, "not-owner",
                         "chunk pushed on an endpoint that does not serve it"));
    return;
  }
  const std::size_t ordinal = shared_.assignment.chunk_ordinal(push.key_id, push.chunk_index);
  const std::size_t b = buffer_of_ordinal_[ordinal];
  if (b == static_cast<std::size_t>(-1)) {
    out.push_back(reject(shared_, from, worker, "not-owner", "chunk routed to the wrong core shard"));
    return;
  }
  AggregationBuffer& buffer = buffers_[b];
  const ChunkDescriptor& chunk = buffer.chunk();
  if (push.iteration != buffer.iteration()) {
    out.push_back(reject(shared_, from, worker, "bsp-violation",
                         "push for iteration " + std::to_string(push.iteration) + ", chunk at iteration " +
                             std::to_string(buffer.iteration())));
    return;
  }
  if (push.payload.size() != chunk.byte_size) {
    out.push_back(reject(shared_, from, worker, "protocol-error", "payload length does not match chunk"));
    return;
  }

  AcceptStatus status;
  try {
    scratch_.resize(chunk.element_count);
    payload_to_floats(push.payload, scratch_);
    status = buffer.accept_gradient(worker, push.iteration, scratch_);
  } catch (const Error& e) {
    const std::string reason = e.code() == ErrorCode::kDuplicatePush ? "duplicate-push" : "protocol-error";
    out.push_back(reject(shared_, from, worker, reason, e.what()));
    return;
  }
  auto& counters = counters_for(push.iteration);
  counters.push_payload_bytes += push.payload.size();
  counters.header_bytes += kHeaderBytes;
  if (status == AcceptStatus::kPartial) return;

  auto weights = shared_.store.chunk(chunk);
  try {
    apply_sgd(weights, buffer.finalize_sum(), cfg.optimizer, cfg.worker_count);
  } catch (const Error& e) {
    out.push_back(reject(shared_, from, worker, "numeric-fault", e.what()));
    return;
  }
  buffer.mark_applied();
  const std::uint32_t next = push.iteration + 1;
  buffer.reset_for_iteration(next);

  Message update;
  update.type = MsgType::kModelChunk;
  update.iteration = next;
  update.key_id = chunk.key_id;
  update.chunk_index = chunk.chunk_index;
  update.payload = floats_to_payload(weights);
  for (std::uint32_t w = 0; w < cfg.worker_count; ++w) {
    update.worker_id = static_cast<std::uint16_t>(w);
    const ConnId to = shared_.registry.at(w, endpoint);
    if (w + 1 == cfg.worker_count) {
      out.push_back({to, std::move(update)});
    } else {
      out.push_back({to, update});
    }
  }
  counters.bcast_payload_bytes += std::uint64_t{cfg.worker_count} * chunk.byte_size;
  counters.header_bytes += std::uint64_t{cfg.worker_count} * kHeaderBytes;
  ++counters.chunks_completed;
}

ParameterServer::ParameterServer(ModelSpec spec, ServerConfig cfg, ModelStore initial)
    : shared_(std::make_unique<ServerShared>(std::move(spec), std::move(cfg), std::move(initial))) {
  for (std::uint32_t c = 0; c < shared_->cfg.core_count; ++c) {
    shards_.push_back(std::make_unique<CoreShard>(c, *shared_));
  }
}

ParameterServer::~ParameterServer() = default;

std::vector<Outbound> ParameterServer::on_frame(ConnId conn, std::uint32_t endpoint, const Message& m) {
  switch (m.type) {
    case MsgType::kRegister: return handle_register(conn, endpoint, m);
    case MsgType::kPushGrad: return step_chunk(conn, m);
    case MsgType::kFin: return handle_fin(conn, m);
    case MsgType::kError:
      shared_->status.fail("worker " + std::to_string(m.worker_id) + " reported: " + error_reason(m));
      return {};
    default:
      return {reject(*shared_, conn, m.worker_id, "protocol-error",
                     "unexpected " + std::string(to_string(m.type)) + " from worker")};
  }
}

std::vector<Outbound> ParameterServer::handle_register(ConnId conn, std::uint32_t endpoint, const Message& m) {
  auto& s = *shared_;
  std::lock_guard lock(s.control_mutex);
  std::vector<Outbound> out;
  const std::uint16_t worker = m.worker_id;
  RegisterBody body;
  try {
    body = decode_register(m.payload);
  } catch (const Error& e) {
    out.push_back(reject(s, conn, worker, "protocol-error", e.what(), false));
    return out;
  }
  if (body.spec_hash != spec_hash(s.spec)) {
    out.push_back(reject(s, conn, worker, "spec-mismatch", "model spec hash differs", false));
    return out;
  }
  if (body.worker_count != s.cfg.worker_count || worker >= s.cfg.worker_count) {
    out.push_back(reject(s, conn, worker, "worker-count-mismatch",
                         "worker " + std::to_string(worker) + " of " + std::to_string(body.worker_count), false));
    return out;
  }
  if (endpoint >= s.cfg.endpoint_count()) {
    out.push_back(reject(s, conn, worker, "protocol-error", "unknown endpoint", false));
    return out;
  }
  if (s.registry.at(worker, endpoint) != kNoConn || s.conn_owner.contains(conn) || s.registry.sealed()) {
    out.push_back(reject(s, conn, worker, "duplicate-worker", "worker " + std::to_string(worker), false));
    return out;
  }
  s.registry.bind(worker, endpoint, conn);
  s.conn_owner[conn] = {worker, endpoint};

  Message ack;
  ack.type = MsgType::kRegisterAck;
  ack.worker_id = worker;
  ack.payload = encode_assignment_table(s.table_for(endpoint));
  s.registration_bytes += m.payload.size() + ack.payload.size() + 2 * kHeaderBytes;
  out.push_back({conn, std::move(ack)});

  if (s.registry.worker_complete(worker) && ++s.registered_workers == s.cfg.worker_count) {
    s.registry.seal();
    for (std::size_t full : s.owned) {
      const auto& chunk = s.all_chunks[full];
      Message init;
      init.type = MsgType::kModelChunk;
      init.iteration = 0;
      init.key_id = chunk.key_id;
      init.chunk_index = chunk.chunk_index;
      init.payload = floats_to_payload(s.store.chunk(chunk));
      for (std::uint32_t w = 0; w < s.cfg.worker_count; ++w) {
        init.worker_id = static_cast<std::uint16_t>(w);
        out.push_back({s.registry.at(w, s.serving[full]), init});
        s.registration_bytes += kHeaderBytes + init.payload.size();
      }
    }
  }
  return out;
}

std::vector<Outbound> ParameterServer::step_chunk(ConnId conn, const Message& push) {
  std::vector<Outbound> out;
  if (push.type != MsgType::kPushGrad) {
    out.push_back(reject(*shared_, conn, push.worker_id, "protocol-error", "step_chunk expects PUSH_GRAD"));
    return out;
  }
  const auto core = core_for(push);
  if (!core) {
    out.push_back(reject(*shared_, conn, push.worker_id, "not-owner",
                         "chunk (" + std::to_string(push.key_id) + ", " + std::to_string(push.chunk_index) +
                             ") is not owned by this server"));
    return out;
  }
  shards_[*core]->on_push(conn, push, out);
  return out;
}

std::vector<Outbound> ParameterServer::handle_fin(ConnId conn, const Message& m) {
  auto& s = *shared_;
  std::lock_guard lock(s.control_mutex);
  auto it = s.conn_owner.find(conn);
  if (it == s.conn_owner.end()) {
    return {reject(s, conn, m.worker_id, "protocol-error", "FIN from unregistered connection")};
  }
  if (m.iteration != s.cfg.iterations) {
    return {reject(s, conn, m.worker_id, "bsp-violation",
                   "FIN at iteration " + std::to_string(m.iteration) + ", run has " +
                       std::to_string(s.cfg.iterations))};
  }
  if (!s.fins.insert(conn).second) {
    return {reject(s, conn, m.worker_id, "protocol-error", "duplicate FIN")};
  }
  if (s.fins.size() == std::size_t{s.cfg.worker_count} * s.cfg.endpoint_count()) {
    s.finished.store(true, std::memory_order_release);
  }
  return {};
}

std::optional<std::uint32_t> ParameterServer::core_for(const Message& push) const {
  const auto full = shared_->full_ordinal(push.key_id, push.chunk_index);
  if (!full || shared_->serving[*full] == kNotServed) return std::nullopt;
  return shared_->assignment.placement(push.key_id, push.chunk_index).core_shard;
}

CoreShard& ParameterServer::shard(std::uint32_t core) { return *shards_.at(core); }

bool ParameterServer::finished() const { return shared_->finished.load(std::memory_order_acquire); }
bool ParameterServer::failed() const { return shared_->status.failed(); }
std::string ParameterServer::failure() const { return shared_->status.reason(); }
void ParameterServer::fail(std::string reason) { shared_->status.fail(std::move(reason)); }

const ModelSpec& ParameterServer::spec() const { return shared_->spec; }
const ServerConfig& ParameterServer::config() const { return shared_->cfg; }
const ModelStore& ParameterServer::model() const { return shared_->store; }
const ChunkAssignment& ParameterServer::assignment() const { return shared_->assignment; }
const std::vector<std::size_t>& ParameterServer::owned_chunks() const { return shared_->owned; }
std::uint32_t ParameterServer::serving_endpoint(std::size_t chunk_ordinal) const {
  return shared_->serving.at(chunk_ordinal);
}

ServerMetrics ParameterServer::metrics() const {
  ServerMetrics m;
  for (const auto& shard : shards_) {
    const auto& c = shard->counters();
    if (m.iterations.size() < c.size()) m.iterations.resize(c.size());
    for (std::size_t t = 0; t < c.size(); ++t) m.iterations[t] += c[t];
  }
  if (m.iterations.size() < shared_->cfg.iterations && finished()) m.iterations.resize(shared_->cfg.iterations);
  m.core_loads = load_report(shared_->assignment);
  m.registration_bytes = shared_->registration_bytes;
  m.owned_bytes = shared_->owned_bytes;
  return m;
}

std::uint64_t ParameterServer::applied_updates() const {
  std::uint64_t n = 0;
  for (const auto& shard : shards_) n += shard->applied_updates();
  return n;
}

// ServerRunner

namespace {

template <typename T>
class BlockingQueue {
 public:
  void push(T v) {
    {
      std::lock_guard lock(mutex_);
      items_.push_back(std::move(v));
    }
    ready_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mutex_);
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    ready_.notify_all();
  }

 private:
  std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<T> items_;
  bool closed_ = false;
};

// Fixed-capacity connection table; slots are published once and never moved.
class ConnectionTable {
 public:
  explicit ConnectionTable(std::size_t capacity) : slots_(capacity) {}

  std::optional<ConnId> add(std::unique_ptr<Connection> c, std::uint32_t endpoint) {
    std::lock_guard lock(mutex_);
    if (owned_.size() >= slots_.size()) return std::nullopt;
    const auto id = static_cast<ConnId>(owned_.size());
    slots_[id].endpoint = endpoint;
    slots_[id].conn.store(c.get(), std::memory_order_release);
    owned_.push_back(std::move(c));
    return id;
  }

  Connection* get(ConnId id) const {
    return id < slots_.size() ? slots_[id].conn.load(std::memory_order_acquire) : nullptr;
  }
  std::uint32_t endpoint(ConnId id) const { return slots_[id].endpoint; }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return owned_.size();
  }

  void close_all() {
    std::lock_guard lock(mutex_);
    for (auto& c : owned_) c->close();
  }

 private:
  struct Slot {
    std::atomic<Connection*> conn{nullptr};
    std::uint32_t endpoint = 0;
  };
  mutable std::mutex mutex_;
  std::vector<Slot> slots_;
  std::vector<std::unique_ptr<Connection>> owned_;
};

void deliver(const ConnectionTable& table, ParameterServer& server, std::vector<Outbound>& out) {
  for (auto& o : out) {
    Connection* c = table.get(o.conn);
    if (c == nullptr) continue;
    try {
      c->send(encode_message(o.message));
    } catch (const Error& e) {
      server.fail(std::string("send failed: ") + e.what());
    }
  }
  out.clear();
}

}  // namespace

ServerRunner::ServerRunner(ModelSpec spec, ServerConfig cfg, Transport& transport) {
  server_ = std::make_unique<ParameterServer>(std::move(spec), cfg);
  for (const auto& address : cfg.listen) listeners_.push_back(transport.listen(address));
}

ServerRunner::~ServerRunner() {
  for (auto& l : listeners_) l->close();
}

std::vector<std::string> ServerRunner::addresses() const {
  std::vector<std::string> out;
  for (const auto& l : listeners_) out.push_back(l->address());
  return out;
}

int ServerRunner::run() {
  const int rc = server_->config().single_thread ? run_single_thread() : run_threaded();
  for (auto& l : listeners_) l->close();
  return rc;
}

int ServerRunner::run_threaded() {
  auto& server = *server_;
  const auto& cfg = server.config();
  ConnectionTable table(std::size_t{cfg.worker_count} * cfg.endpoint_count() * 4 + 16);

  std::mutex done_mutex;
  std::condition_variable done_cv;
  auto poke = [&] {
    std::lock_guard lock(done_mutex);
    done_cv.notify_all();
  };

  struct Inbound {
    ConnId conn;
    Message message;
  };
  std::vector<std::unique_ptr<BlockingQueue<Inbound>>> queues;
  std::vector<std::thread> shard_threads;
  for (std::uint32_t c = 0; c < cfg.core_count; ++c) {
    queues.push_back(std::make_unique<BlockingQueue<Inbound>>());
  }
  for (std::uint32_t c = 0; c < cfg.core_count; ++c) {
    shard_threads.emplace_back([&, c] {
      auto& shard = server.shard(c);
      std::vector<Outbound> out;
      while (auto item = queues[c]->pop()) {
        shard.on_push(item->conn, item->message, out);
        deliver(table, server, out);
        if (server.failed()) poke();
      }
    });
  }

  std::mutex readers_mutex;
  std::vector<std::thread> readers;
  auto reader = [&](ConnId id) {
    Connection* conn = table.get(id);
    const std::uint32_t endpoint = table.endpoint(id);
    FrameReader frames;
    Bytes buf;
    bool registered = false;
    bool fin = false;
    std::vector<Outbound> out;
    for (;;) {
      buf.clear();
      const auto st = conn->recv_some(buf, true);
      if (st == RecvStatus::kClosed) break;
      frames.feed(std::move(buf));
      try {
        while (auto m = frames.next()) {
          if (m->type == MsgType::kPushGrad) {
            if (auto core = server.core_for(*m)) {
              queues[*core]->push({id, std::move(*m)});
              continue;
            }
          }
          if (m->type == MsgType::kRegister) registered = true;
          if (m->type == MsgType::kFin) fin = true;
          out = server.on_frame(id, endpoint, *m);
          deliver(table, server, out);
        }
      } catch (const Error& e) {
        try {
          conn->send_message(make_error(0, "protocol-error"));
        } catch (const Error&) {
        }
        server.fail(std::string("connection ") + std::to_string(id) + ": " + e.what());
      }
      if (server.failed() || server.finished()) poke();
    }
    if (registered && !fin && !server.finished()) {
      server.fail("worker disconnected mid-run on connection " + std::to_string(id));
    }
    poke();
  };

  std::vector<std::thread> acceptors;
  for (std::uint32_t e = 0; e < listeners_.size(); ++e) {
    acceptors.emplace_back([&, e] {
      while (auto c = listeners_[e]->accept()) {
        auto id = table.add(std::move(c), e);
        if (!id) continue;
        std::lock_guard lock(readers_mutex);
        readers.emplace_back(reader, *id);
      }
    });
  }

  {
    std::unique_lock lock(done_mutex);
    while (!done_cv.wait_for(lock, std::chrono::milliseconds(20),
                             [&] { return server.finished() || server.failed(); })) {
    }
  }

  for (auto& l : listeners_) l->close();
  for (auto& t : acceptors) t.join();
  for (auto& q : queues) q->close();
  for (auto& t : shard_threads) t.join();
  table.close_all();
  {
    std::lock_guard lock(readers_mutex);
    for (auto& t : readers) t.join();
  }
  return server.finished() && !server.failed() ? 0 : 1;
}

int ServerRunner::run_single_thread() {
  auto& server = *server_;
  const auto& cfg = server.config();
  ConnectionTable table(std::size_t{cfg.worker_count} * cfg.endpoint_count() * 4 + 16);

  // Acceptors only hand connections over; every frame is processed here.
  BlockingQueue<std::pair<std::unique_ptr<Connection>, std::uint32_t>> accepted;
  std::vector<std::thread> acceptors;
  for (std::uint32_t e = 0; e < listeners_.size(); ++e) {
    acceptors.emplace_back([&, e] {
      while (auto c = listeners_[e]->accept()) accepted.push({std::move(c), e});
    });
  }

  struct Peer {
    ConnId id;
    FrameReader frames;
    bool registered = false;
    bool fin = false;
    bool open = true;
  };
  std::vector<Peer> peers;
  std::vector<Outbound> out;
  Bytes buf;
  while (!server.finished() && !server.failed()) {
    while (auto a = accepted.try_pop()) {
      if (auto id = table.add(std::move(a->first), a->second)) peers.push_back(Peer{*id, {}, false, false, true});
    }
    bool progress = false;
    for (auto& p : peers) {
      if (!p.open) continue;
      buf.clear();
      const auto st = table.get(p.id)->recv_some(buf, false);
      if (st == RecvStatus::kEmpty) continue;
      progress = true;
      if (st == RecvStatus::kClosed) {
        p.open = false;
        if (p.registered && !p.fin) server.fail("worker disconnected mid-run on connection " + std::to_string(p.id));
        continue;
      }
      p.frames.feed(std::move(buf));
      try {
        while (auto m = p.frames.next()) {
          if (m->type == MsgType::kRegister) p.registered = true;
          if (m->type == MsgType::kFin) p.fin = true;
          out = server.on_frame(p.id, table.endpoint(p.id), *m);
          deliver(table, server, out);
        }
      } catch (const Error& e) {
        server.fail(std::string("connection ") + std::to_string(p.id) + ": " + e.what());
      }
    }
    if (!progress) std::this_thread::sleep_for(std::chrono::microseconds(50));
  }

  for (auto& l : listeners_) l->close();
  accepted.close();
  for (auto& t : acceptors) t.join();
  table.close_all();
  return server.finished() && !server.failed() ? 0 : 1;
}

}  // namespace phub
