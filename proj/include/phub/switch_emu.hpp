#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "phub/aggregation.hpp"

namespace phub {

/// Integer-only top-of-rack switch limits.
struct SwitchModel {
  std::uint64_t scale = 65536;       // power of two
  std::uint32_t accumulator_width = 32;
  std::uint32_t region_bytes = 1024;  // aggregatable payload per packet
  std::uint32_t storage_slots = 64;   // concurrent in-flight fragment aggregations

  std::int64_t acc_max() const;
  std::int64_t acc_min() const;
};

void validate(const SwitchModel& m);

/// Workers grouped by rack; every worker id 0..W-1 appears exactly once.
struct Topology {
  std::vector<std::vector<std::uint32_t>> racks;

  std::size_t rack_count() const { return racks.size(); }
  std::size_t worker_count() const;
};

Topology uniform_topology(std::uint32_t racks, std::uint32_t workers_per_rack);
void validate(const Topology& t);

/// Payload bytes per link class, counted in float-chunk bytes.
struct TrafficReport {
  std::uint64_t worker_to_tor_bytes = 0;
  std::uint64_t tor_to_root_bytes = 0;  // cross-rack, upward
  std::uint64_t root_to_tor_bytes = 0;  // cross-rack, downward
  std::uint64_t tor_to_worker_bytes = 0;
  std::uint64_t fragments = 0;          // per-rack packet aggregations
  std::uint64_t storage_waves = 0;      // rounds forced by storage_slots

  std::uint64_t cross_rack_bytes() const { return tor_to_root_bytes + root_to_tor_bytes; }
  TrafficReport& operator+=(const TrafficReport& o);
  bool operator==(const TrafficReport&) const = default;
};

/// round-half-even(v * scale). Throws Error(kQuantizationRange) unless
/// |v| * scale < acc_max / worker_count for every element, which rules out
/// accumulator overflow when worker_count payloads are summed.
std::vector<std::int64_t> quantize(std::span<const float> values, const SwitchModel& model,
                                   std::uint32_t worker_count = 1);

std::vector<float> dequantize(std::span<const std::int64_t> values, std::uint64_t scale);

/// Elementwise sum of equal-length packets in packet order, in
/// accumulator_width arithmetic. Throws Error(kSwitchOverflow) iff some
/// partial sum leaves the accumulator range.
std::vector<std::int64_t> switch_aggregate(std::span<const std::vector<std::int64_t>> packets,
                                           const SwitchModel& model);

struct HierarchicalResult {
  std::vector<float> aggregate;
  TrafficReport traffic;
};

/// Quantize at workers, sum per rack fragment by fragment at the ToR, send
/// one stream per rack to the root, sum and dequantize there (averaging over
/// all workers when cfg.average_gradients).
HierarchicalResult hierarchical_reduce(const Topology& topology, std::span<const std::vector<float>> payloads,
                                       const SwitchModel& model, const OptimizerConfig& cfg);

struct TrafficComparison {
  std::uint64_t flat_cross_rack_bytes = 0;
  std::uint64_t hier_cross_rack_bytes = 0;
};

/// Flat: every worker's push and pull crosses the root links.
/// Hierarchical: one stream per rack up, one multicast per rack down.
TrafficComparison traffic_compare(const Topology& topology, std::uint64_t model_bytes, std::uint32_t worker_count);

}  // namespace phub
