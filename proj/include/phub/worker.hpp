#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phub/model.hpp"
#include "phub/transport.hpp"
#include "phub/wire.hpp"

namespace phub {

enum class WorkerMode { kLogReg, kZeroCompute };

std::string_view to_string(WorkerMode m);
WorkerMode parse_worker_mode(std::string_view text);

/// Row-major samples x dim features with 0/1 labels.
///
/// Generation is a 64-bit LCG (state = state * 6364136223846793005 +
/// 1442695040888963407, seeded with `seed`); each draw maps the top 24 bits
/// of the new state to [-1, 1) as (bits / 2^23) - 1. The first `dim` draws
/// form the ground-truth hyperplane w*, then each sample takes `dim` draws in
/// order. A label is 1 iff dot(x, w*) > 0, accumulated in float.
struct SyntheticDataset {
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<float> labels;
  std::vector<float> hyperplane;

  bool operator==(const SyntheticDataset&) const = default;
};

struct DatasetView {
  std::span<const float> features;
  std::span<const float> labels;
  std::size_t dim = 0;

  std::size_t samples() const { return labels.size(); }
};

SyntheticDataset synthetic_dataset(std::uint64_t seed, std::size_t samples, std::size_t dim);

DatasetView view(const SyntheticDataset& d);
/// Samples [worker * n / workers, (worker + 1) * n / workers).
DatasetView worker_slice(const SyntheticDataset& d, std::uint32_t worker, std::uint32_t workers);

float sigmoid(float z);

/// Mean over the batch of (sigmoid(w.x) - y) * x, accumulated in float in
/// sample order.
std::vector<float> logreg_gradient(std::span<const float> weights, const DatasetView& batch);

/// Mean logistic loss, evaluated in double.
double logistic_loss(std::span<const float> weights, const DatasetView& data);

float zero_compute_value(std::uint32_t iteration);
/// One payload per chunk, every element zero_compute_value(iteration).
std::vector<std::vector<float>> zero_compute_gradients(std::span<const ChunkDescriptor> chunks,
                                                       std::uint32_t iteration);

/// Key layout used by the logistic-regression workload: the weight vector
/// split into min(4, dim) near-equal keys.
ModelSpec logreg_model_spec(std::size_t dim);

struct WorkerConfig {
  std::uint32_t worker_id = 0;
  std::uint32_t worker_count = 1;
  std::vector<std::string> connect;
  WorkerMode mode = WorkerMode::kLogReg;
  std::uint32_t iterations = 1;
  std::uint64_t seed = 1;
  std::size_t samples = 400;  // total across workers
  std::size_t dim = 16;
  ModelSpec spec;
  /// LOGREG only: evaluate the union-dataset loss of every model version.
  bool track_loss = false;
};

void validate(const WorkerConfig& cfg);

struct WorkerOutbound {
  std::size_t conn = 0;
  Message message;
};

struct WorkerIterationCounters {
  std::uint64_t push_payload_bytes = 0;
  std::uint64_t model_payload_bytes = 0;
  std::uint64_t header_bytes = 0;
  double wall_ms = 0.0;

  bool operator==(const WorkerIterationCounters&) const = default;
};

/// Worker client as a message-driven state machine over one connection per
/// server endpoint. Iteration t computes gradients on the local mirror,
/// pushes PUSH_GRAD(t) for every chunk on its serving connection and waits
/// for every MODEL_CHUNK(t + 1).
class WorkerClient {
 public:
  explicit WorkerClient(WorkerConfig cfg);

  std::vector<WorkerOutbound> start();
  std::vector<WorkerOutbound> on_frame(std::size_t conn, const Message& m);

  bool done() const { return done_; }
  bool failed() const { return !failure_.empty(); }
  const std::string& failure() const { return failure_; }
  void fail(std::string reason);

  const WorkerConfig& config() const { return cfg_; }
  const ModelStore& mirror() const { return mirror_; }
  /// Iterations whose updated model has fully arrived.
  std::uint32_t completed_iterations() const { return completed_; }
  const std::vector<WorkerIterationCounters>& counters() const { return counters_; }
  /// Union-dataset loss per model version (track_loss only).
  const std::vector<double>& losses() const { return losses_; }
  /// Connection index serving each chunk ordinal, after all ACKs arrive.
  const std::vector<std::size_t>& routes() const { return routes_; }

  /// Called with (model version, mirror) each time a full model version
  /// arrives, starting with version 0.
  std::function<void(std::uint32_t, const ModelStore&)> on_model;

 private:
  void handle_ack(std::size_t conn, const Message& m, std::vector<WorkerOutbound>& out);
  void handle_model(const Message& m, std::vector<WorkerOutbound>& out);
  void maybe_advance(std::vector<WorkerOutbound>& out);
  void push_gradients(std::vector<WorkerOutbound>& out);
  Message header(MsgType type, std::uint32_t iteration) const;

  WorkerConfig cfg_;
  std::optional<SyntheticDataset> data_;
  ModelStore mirror_;
  std::vector<ChunkDescriptor> chunks_;
  std::vector<std::size_t> key_first_chunk_;
  std::vector<std::uint64_t> key_flat_offset_;
  std::vector<std::optional<AssignmentTable>> tables_;
  std::size_t acks_ = 0;
  std::vector<std::size_t> routes_;
  std::uint32_t expected_ = 0;  // version of the next model to receive
  std::vector<bool> received_;
  std::size_t received_count_ = 0;
  std::uint32_t completed_ = 0;
  bool done_ = false;
  std::string failure_;
  std::vector<WorkerIterationCounters> counters_;
  std::vector<double> losses_;
  std::chrono::steady_clock::time_point iteration_start_;
};

struct WorkerResult {
  int status = 0;
  std::string failure;
  ModelStore mirror;
  std::vector<WorkerIterationCounters> counters;
  std::vector<double> losses;
};

/// Connects to every address in cfg.connect and runs the client to
/// completion with one reader thread per connection.
WorkerResult run_worker(WorkerConfig cfg, Transport& transport,
                        std::function<void(std::uint32_t, const ModelStore&)> on_model = {});

}  // namespace phub
