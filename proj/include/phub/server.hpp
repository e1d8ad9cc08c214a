#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "phub/aggregation.hpp"
#include "phub/assignment.hpp"
#include "phub/model.hpp"
#include "phub/transport.hpp"
#include "phub/wire.hpp"

namespace phub {

enum class Deployment { kCentral, kPBox, kShardMember };

std::string_view to_string(Deployment d);
Deployment parse_deployment(std::string_view text);
AggregationMode parse_aggregation_mode(std::string_view text);

struct ServerConfig {
  std::vector<std::string> listen = {"127.0.0.1:0"};  // one address per endpoint
  std::uint32_t core_count = 1;
  std::uint32_t group_count = 1;
  std::uint64_t chunk_bytes = kDefaultChunkBytes;
  std::uint32_t worker_count = 1;
  OptimizerConfig optimizer;
  AggregationMode mode = AggregationMode::kFast;
  Deployment deployment = Deployment::kCentral;
  std::uint32_t shard_index = 0;
  std::uint32_t shard_count = 1;
  std::uint32_t iterations = 1;
  bool single_thread = false;

  std::uint32_t endpoint_count() const { return static_cast<std::uint32_t>(listen.size()); }
};

void validate(const ServerConfig& cfg, const ModelSpec& spec);

/// Contiguous key ranges balanced by bytes, one per shard, in key order.
std::vector<std::vector<std::uint32_t>> shard_keyspace(const ModelSpec& spec, std::uint32_t shard_count);

/// Driver-assigned handle of an accepted connection.
using ConnId = std::uint32_t;
inline constexpr ConnId kNoConn = 0xFFFFFFFFu;

struct Outbound {
  ConnId conn = kNoConn;
  Message message;
};

/// Exact payload accounting for one training iteration (the iteration tag
/// of the pushes). Registration traffic and the iteration-0 model are
/// excluded.
struct IterationCounters {
  std::uint64_t push_payload_bytes = 0;
  std::uint64_t bcast_payload_bytes = 0;
  std::uint64_t header_bytes = 0;
  std::uint64_t chunks_completed = 0;

  IterationCounters& operator+=(const IterationCounters& o);
  bool operator==(const IterationCounters&) const = default;
};

struct ServerMetrics {
  std::vector<IterationCounters> iterations;
  std::vector<CoreLoad> core_loads;
  std::uint64_t registration_bytes = 0;
  std::uint64_t owned_bytes = 0;
};

/// Failure latch shared by the roles of one server.
class ServerStatus {
 public:
  void fail(std::string reason);
  bool failed() const { return failed_.load(std::memory_order_acquire); }
  std::string reason() const;

 private:
  std::atomic<bool> failed_{false};
  mutable std::mutex mutex_;
  std::string reason_;
};

/// (worker, endpoint) -> connection table. Written by the control plane
/// during registration and read-only once sealed.
class ConnectionRegistry {
 public:
  ConnectionRegistry(std::uint32_t worker_count, std::uint32_t endpoint_count);

  ConnId at(std::uint32_t worker, std::uint32_t endpoint) const { return table_[worker * endpoints_ + endpoint]; }
  void bind(std::uint32_t worker, std::uint32_t endpoint, ConnId conn) { table_[worker * endpoints_ + endpoint] = conn; }
  bool worker_complete(std::uint32_t worker) const;

  void seal() { sealed_.store(true, std::memory_order_release); }
  bool sealed() const { return sealed_.load(std::memory_order_acquire); }

 private:
  std::uint32_t workers_;
  std::uint32_t endpoints_;
  std::vector<ConnId> table_;
  std::atomic<bool> sealed_{false};
};

struct ServerShared;

/// Per-core processing context: exclusively owns the aggregation buffers
/// and model slices of its chunks.
class CoreShard {
 public:
  CoreShard(std::uint32_t core, ServerShared& shared);

  std::uint32_t core() const { return core_; }
  void on_push(ConnId from, const Message& push, std::vector<Outbound>& out);

  const std::vector<IterationCounters>& counters() const { return counters_; }
  std::uint64_t applied_updates() const;

 private:
  IterationCounters& counters_for(std::uint32_t iteration);

  std::uint32_t core_;
  ServerShared& shared_;
  std::vector<AggregationBuffer> buffers_;
  std::vector<std::size_t> buffer_of_ordinal_;
  std::vector<IterationCounters> counters_;
  std::vector<float> scratch_;
};

/// The parameter server as a message-driven state machine. Drivers feed
/// decoded frames from connections and deliver the returned outbound frames.
/// Protocol violations produce an ERROR frame for the sender and latch the
/// failure status.
class ParameterServer {
 public:
  ParameterServer(ModelSpec spec, ServerConfig cfg, ModelStore initial = {});
  ~ParameterServer();

  ParameterServer(const ParameterServer&) = delete;
  ParameterServer& operator=(const ParameterServer&) = delete;

  /// Dispatches any frame; `endpoint` is the endpoint that accepted `conn`.
  std::vector<Outbound> on_frame(ConnId conn, std::uint32_t endpoint, const Message& m);

  std::vector<Outbound> handle_register(ConnId conn, std::uint32_t endpoint, const Message& m);
  std::vector<Outbound> step_chunk(ConnId conn, const Message& push);
  std::vector<Outbound> handle_fin(ConnId conn, const Message& m);

  /// Core shard owning the pushed chunk, or nullopt if not owned here.
  std::optional<std::uint32_t> core_for(const Message& push) const;
  CoreShard& shard(std::uint32_t core);

  bool finished() const;
  bool failed() const;
  std::string failure() const;
  void fail(std::string reason);

  const ModelSpec& spec() const;
  const ServerConfig& config() const;
  const ModelStore& model() const;
  const ChunkAssignment& assignment() const;
  /// Chunk ordinals (in full-model partition order) owned by this server.
  const std::vector<std::size_t>& owned_chunks() const;
  /// Endpoint serving a chunk ordinal after deployment routing, or kNotServed.
  std::uint32_t serving_endpoint(std::size_t chunk_ordinal) const;

  ServerMetrics metrics() const;
  std::uint64_t applied_updates() const;

 private:
  std::unique_ptr<ServerShared> shared_;
  std::vector<std::unique_ptr<CoreShard>> shards_;
};

/// Binds one listener per endpoint, then serves a full training run.
class ServerRunner {
 public:
  ServerRunner(ModelSpec spec, ServerConfig cfg, Transport& transport);
  ~ServerRunner();

  /// Actual listen addresses (ephemeral ports resolved).
  std::vector<std::string> addresses() const;

  /// Blocks until all workers finish (returns 0) or the run fails (nonzero).
  int run();

  /// Makes a running run() return nonzero promptly.
  void abort(std::string reason) { server_->fail(std::move(reason)); }

  const ParameterServer& server() const { return *server_; }
  std::string failure() const { return server_->failure(); }

 private:
  int run_threaded();
  int run_single_thread();

  std::unique_ptr<ParameterServer> server_;
  std::vector<std::unique_ptr<Listener>> listeners_;
};

}  // namespace phub
