#include "phub/switch_emu.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "phub/error.hpp"
#include "phub/model.hpp"

namespace phub {

std::int64_t SwitchModel::acc_max() const {
  return accumulator_width == 32 ? std::numeric_limits<std::int32_t>::max() : std::numeric_limits<std::int64_t>::max();
}

std::int64_t SwitchModel::acc_min() const {
  return accumulator_width == 32 ? std::numeric_limits<std::int32_t>::min() : std::numeric_limits<std::int64_t>::min();
}

void validate(const SwitchModel& m) {
  if (m.scale < 2 || !std::has_single_bit(m.scale)) {
    throw Error(ErrorCode::kInvalidConfig, "scale must be a power of two >= 2");
  }
  if (m.accumulator_width != 32 && m.accumulator_width != 64) {
    throw Error(ErrorCode::kInvalidConfig, "accumulator width must be 32 or 64");
  }
  if (m.region_bytes < 4 || m.region_bytes % 4 != 0) {
    throw Error(ErrorCode::kInvalidConfig, "region bytes must be a positive multiple of 4");
  }
  if (m.storage_slots < 1) throw Error(ErrorCode::kInvalidConfig, "switch needs at least one storage slot");
}

std::size_t Topology::worker_count() const {
  std::size_t n = 0;
  for (const auto& r : racks) n += r.size();
  return n;
}

Topology uniform_topology(std::uint32_t racks, std::uint32_t workers_per_rack) {
  if (racks == 0 || workers_per_rack == 0) {
    throw Error(ErrorCode::kInvalidConfig, "topology needs at least one rack and one worker per rack");
  }
  Topology t;
  std::uint32_t next = 0;
  for (std::uint32_t r = 0; r < racks; ++r) {
    auto& rack = t.racks.emplace_back();
    for (std::uint32_t w = 0; w < workers_per_rack; ++w) rack.push_back(next++);
  }
  return t;
}

void validate(const Topology& t) {
  if (t.racks.empty()) throw Error(ErrorCode::kInvalidConfig, "topology has no racks");
  const std::size_t n = t.worker_count();
  std::vector<bool> seen(n, false);
  for (const auto& rack : t.racks) {
    if (rack.empty()) throw Error(ErrorCode::kInvalidConfig, "empty rack");
    for (auto w : rack) {
      if (w >= n || seen[w]) throw Error(ErrorCode::kInvalidConfig, "worker ids must be 0..W-1, once each");
      seen[w] = true;
    }
  }
}

TrafficReport& TrafficReport::operator+=(const TrafficReport& o) {
  worker_to_tor_bytes += o.worker_to_tor_bytes;
  tor_to_root_bytes += o.tor_to_root_bytes;
  root_to_tor_bytes += o.root_to_tor_bytes;
  tor_to_worker_bytes += o.tor_to_worker_bytes;
  fragments += o.fragments;
  storage_waves += o.storage_waves;
  return *this;
}

std::vector<std::int64_t> quantize(std::span<const float> values, const SwitchModel& model,
                                   std::uint32_t worker_count) {
  validate(model);
  if (worker_count == 0) throw Error(ErrorCode::kInvalidConfig, "worker count must be at least 1");
  // Scaling by a power of two is exact in long double for any float input.
  const long double limit = static_cast<long double>(model.acc_max()) / worker_count;
  std::vector<std::int64_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const long double scaled = static_cast<long double>(values[i]) * static_cast<long double>(model.scale);
    if (!std::isfinite(values[i]) || std::fabs(scaled) >= limit) {
      throw Error(ErrorCode::kQuantizationRange,
                  "element " + std::to_string(i) + " = " + std::to_string(values[i]) + " exceeds the " +
                      std::to_string(model.accumulator_width) + "-bit range for " + std::to_string(worker_count) +
                      " workers");
    }
    out[i] = static_cast<std::int64_t>(std::nearbyint(scaled));
  }
  return out;
}

std::vector<float> dequantize(std::span<const std::int64_t> values, std::uint64_t scale) {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<float>(static_cast<long double>(values[i]) / static_cast<long double>(scale));
  }
  return out;
}

std::vector<std::int64_t> switch_aggregate(std::span<const std::vector<std::int64_t>> packets,
                                           const SwitchModel& model) {
  validate(model);
  if (packets.empty()) return {};
  const std::size_t len = packets.front().size();
  if (len > model.region_bytes / 4) {
    throw Error(ErrorCode::kProtocol, "packet of " + std::to_string(len) + " elements exceeds the " +
                                          std::to_string(model.region_bytes) + "-byte region");
  }
  for (const auto& p : packets) {
    if (p.size() != len) throw Error(ErrorCode::kProtocol, "packets of mixed lengths");
  }
  const __int128 hi = model.acc_max();
  const __int128 lo = model.acc_min();
  std::vector<std::int64_t> acc(len, 0);
  for (std::size_t p = 0; p < packets.size(); ++p) {
    for (std::size_t i = 0; i < len; ++i) {
      const __int128 v = packets[p][i];
      if (v > hi || v < lo) throw Error(ErrorCode::kSwitchOverflow, "packet value outside accumulator range");
      const __int128 sum = static_cast<__int128>(acc[i]) + v;
      if (sum > hi || sum < lo) {
        throw Error(ErrorCode::kSwitchOverflow,
                    "element " + std::to_string(i) + " overflows after packet " + std::to_string(p));
      }
      acc[i] = static_cast<std::int64_t>(sum);
    }
  }
  return acc;
}

HierarchicalResult hierarchical_reduce(const Topology& topology, std::span<const std::vector<float>> payloads,
                                       const SwitchModel& model, const OptimizerConfig& cfg) {
  validate(topology);
  validate(model);
  const auto workers = static_cast<std::uint32_t>(topology.worker_count());
  if (payloads.size() != workers) {
    throw Error(ErrorCode::kProtocol, "expected one payload per worker");
  }
  const std::size_t len = payloads.front().size();
  for (const auto& p : payloads) {
    if (p.size() != len) throw Error(ErrorCode::kProtocol, "payloads of mixed lengths");
  }
  const std::uint64_t chunk_bytes = len * kElementWidth;

  std::vector<std::vector<std::int64_t>> quantized;
  quantized.reserve(workers);
  for (const auto& p : payloads) quantized.push_back(quantize(p, model, workers));

  HierarchicalResult result;
  TrafficReport& traffic = result.traffic;
  const std::size_t region = model.region_bytes / kElementWidth;
  const std::size_t fragments = len == 0 ? 0 : (len + region - 1) / region;

  std::vector<std::vector<std::int64_t>> rack_streams;
  for (const auto& rack : topology.racks) {
    std::vector<std::int64_t> stream(len);
    for (std::size_t f = 0; f < fragments; ++f) {
      const std::size_t begin = f * region;
      const std::size_t n = std::min(region, len - begin);
      std::vector<std::vector<std::int64_t>> packets;
      for (auto w : rack) {
        packets.emplace_back(quantized[w].begin() + begin, quantized[w].begin() + begin + n);
      }
      const auto sum = switch_aggregate(packets, model);
      std::copy(sum.begin(), sum.end(), stream.begin() + begin);
    }
    traffic.worker_to_tor_bytes += rack.size() * chunk_bytes;
    traffic.tor_to_root_bytes += chunk_bytes;
    traffic.root_to_tor_bytes += chunk_bytes;
    traffic.tor_to_worker_bytes += rack.size() * chunk_bytes;
    traffic.fragments += fragments;
    traffic.storage_waves += (fragments + model.storage_slots - 1) / model.storage_slots;
    rack_streams.push_back(std::move(stream));
  }

  // Root reduce, in the same fragment granularity and accumulator width.
  std::vector<std::int64_t> total(len);
  for (std::size_t f = 0; f < fragments; ++f) {
    const std::size_t begin = f * region;
    const std::size_t n = std::min(region, len - begin);
    std::vector<std::vector<std::int64_t>> packets;
    for (const auto& s : rack_streams) packets.emplace_back(s.begin() + begin, s.begin() + begin + n);
    const auto sum = switch_aggregate(packets, model);
    std::copy(sum.begin(), sum.end(), total.begin() + begin);
  }

  const long double divisor =
      static_cast<long double>(model.scale) * (cfg.average_gradients ? static_cast<long double>(workers) : 1.0L);
  result.aggregate.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    result.aggregate[i] = static_cast<float>(static_cast<long double>(total[i]) / divisor);
  }
  return result;
}

TrafficComparison traffic_compare(const Topology& topology, std::uint64_t model_bytes, std::uint32_t worker_count) {
  validate(topology);
  if (worker_count != topology.worker_count()) {
    throw Error(ErrorCode::kInvalidConfig, "worker count does not match topology");
  }
  return {2 * model_bytes * worker_count, 2 * model_bytes * topology.rack_count()};
}

}  // namespace phub
