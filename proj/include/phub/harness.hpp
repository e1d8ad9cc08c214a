#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phub/aggregation.hpp"
#include "phub/config.hpp"
#include "phub/server.hpp"
#include "phub/switch_emu.hpp"
#include "phub/worker.hpp"

namespace phub {

struct MetricsRow {
  std::uint32_t iteration = 0;
  std::optional<double> wall_ms;
  std::uint64_t push_bytes = 0;
  std::uint64_t bcast_bytes = 0;
  std::uint64_t header_bytes = 0;
  std::uint64_t chunks_completed = 0;
  std::uint64_t max_core_load = 0;
  std::uint64_t min_core_load = 0;
  std::optional<double> loss;

  bool operator==(const MetricsRow&) const = default;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;

  bool operator==(const MetricsReport&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "iteration,wall_ms,push_bytes,bcast_bytes,header_bytes,chunks_completed,max_core_load,min_core_load,loss";

std::string format_csv(const MetricsReport& report);
MetricsReport parse_csv(std::string_view text);
void emit_csv(const MetricsReport& report, const std::string& path);
MetricsReport load_csv(const std::string& path);

/// Server-side rows: counters, static core loads, no wall time or loss.
MetricsReport server_report(const ServerMetrics& metrics);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Every row must carry exactly worker_count * model_bytes of gradient
/// payload and of broadcast payload.
CheckResult byte_accounting_check(const MetricsReport& report, std::uint64_t model_bytes, std::uint32_t worker_count);

/// Header bytes per payload byte for a frame carrying `chunk_bytes`.
double header_overhead_ratio(std::uint64_t chunk_bytes);

struct SwitchExperiment {
  std::uint32_t racks = 2;
  std::uint32_t workers_per_rack = 4;
  std::uint64_t model_bytes = 1 << 20;
  std::uint64_t chunk_bytes = kDefaultChunkBytes;
  SwitchModel model;
  std::uint64_t seed = 1;
};

enum class Launch { kInProcess, kSubprocess };

struct ExperimentConfig {
  // [server]
  Deployment deployment = Deployment::kCentral;
  std::uint32_t endpoints = 1;  // per server process
  std::uint32_t cores = 1;
  std::uint32_t groups = 1;
  std::uint64_t chunk_bytes = kDefaultChunkBytes;  // 0: one chunk per key
  AggregationMode agg_mode = AggregationMode::kFast;
  OptimizerConfig optimizer;
  std::uint32_t shard_count = 1;
  std::uint32_t iterations = 10;
  std::string transport = "inproc";  // inproc | tcp
  Launch launch = Launch::kInProcess;
  std::string binary;                // phub executable for subprocess launch
  std::uint32_t base_port = 47100;
  bool single_thread = false;

  // [workers]
  std::uint32_t workers = 1;
  WorkerMode mode = WorkerMode::kLogReg;
  std::uint64_t seed = 1;
  std::size_t samples = 400;
  std::size_t dim = 16;
  std::uint64_t model_bytes = 1 << 20;  // zero mode
  std::uint32_t key_count = 1;          // zero mode

  // [switch]
  std::optional<SwitchExperiment> switch_experiment;
};

ExperimentConfig parse_experiment(const KeyValueConfig& cfg);
ExperimentConfig load_experiment(const std::string& path);

/// Model layout used by an experiment's workload.
ModelSpec experiment_model_spec(const ExperimentConfig& cfg);
/// Server config for shard `shard` (central/pbox: shard 0 only).
ServerConfig experiment_server_config(const ExperimentConfig& cfg, std::uint32_t shard);

struct ExperimentResult {
  MetricsReport report;
  std::vector<float> final_model;                  // assembled from every server
  std::vector<std::vector<float>> worker_mirrors;  // flattened
  std::vector<ServerMetrics> server_metrics;
  std::vector<std::vector<WorkerIterationCounters>> worker_counters;
  std::vector<double> losses;                      // union loss per model version (LOGREG)
  std::uint64_t applied_updates = 0;
  std::uint64_t chunk_count = 0;
  double elapsed_s = 0.0;
  std::vector<CheckResult> checks;

  bool passed() const;
};

/// Runs servers and workers per `cfg`, gathers and merges their metrics.
/// Throws Error on any role failure, with the role's diagnostic.
ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const std::string& config_path);

/// Standard checks: byte accounting, server/worker counter agreement,
/// mirror consistency, exactly-once updates, and for deterministic LOGREG
/// runs, bitwise agreement with train_single_process.
std::vector<CheckResult> standard_checks(const ExperimentConfig& cfg, const ExperimentResult& result);

struct OracleRun {
  std::vector<float> weights;
  std::vector<double> losses;  // per model version, 0..iterations
};

/// Single-process full-batch SGD: per iteration, the workers' mean gradients
/// are summed in worker id order, divided by the worker count and applied.
OracleRun train_single_process(std::uint64_t seed, std::size_t samples, std::size_t dim, std::uint32_t workers,
                               float learning_rate, std::uint32_t iterations);

struct SwitchRunResult {
  TrafficReport traffic;
  TrafficComparison comparison;
  double max_abs_error = 0.0;
  double error_bound = 0.0;
  std::uint64_t chunks = 0;
};

/// Hierarchical reduction of seeded random gradients in [-1, 1] over a whole
/// model, compared with the exact mean.
SwitchRunResult run_switch_experiment(const SwitchExperiment& exp);
void emit_switch_csv(const SwitchExperiment& exp, const SwitchRunResult& r, const std::string& path);
std::vector<CheckResult> switch_checks(const SwitchExperiment& exp, const SwitchRunResult& r);

}  // namespace phub
