#include "phub/assignment.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <queue>
#include <string>
#include <tuple>

#include "phub/error.hpp"

namespace phub {

namespace {

void validate(std::uint32_t cores, std::uint32_t groups, std::uint32_t endpoints) {
  if (groups < 1 || cores < groups) {
    throw Error(ErrorCode::kInvalidConfig, "need core_count >= group_count >= 1");
  }
  if (endpoints < 1) throw Error(ErrorCode::kInvalidConfig, "need at least one endpoint");
  if (cores % groups != 0) {
    throw Error(ErrorCode::kInvalidConfig,
                std::to_string(cores) + " cores do not divide into " + std::to_string(groups) + " groups");
  }
  if (endpoints % groups != 0) {
    throw Error(ErrorCode::kInvalidConfig,
                std::to_string(endpoints) + " endpoints do not divide into " + std::to_string(groups) + " groups");
  }
}

}  // namespace

std::uint32_t ChunkAssignment::endpoint_of_core(std::uint32_t core) const {
  const std::uint32_t cores_per_group = core_count_ / group_count_;
  const std::uint32_t endpoints_per_group = endpoint_count_ / group_count_;
  const std::uint32_t group = core / cores_per_group;
  return group * endpoints_per_group + (core % cores_per_group) % endpoints_per_group;
}

std::size_t ChunkAssignment::chunk_ordinal(std::uint32_t key_id, std::uint32_t chunk_index) const {
  if (key_id < key_ranges_.size() && chunk_index < key_ranges_[key_id].count) {
    return key_ranges_[key_id].first + chunk_index;
  }
  throw Error(ErrorCode::kLookup,
              "no chunk (" + std::to_string(key_id) + ", " + std::to_string(chunk_index) + ") in assignment");
}

ChunkAssignment assign_chunks(std::span<const ChunkDescriptor> chunks, std::uint32_t core_count,
                              std::uint32_t group_count, std::uint32_t endpoint_count) {
  validate(core_count, group_count, endpoint_count);

  ChunkAssignment a;
  a.core_count_ = core_count;
  a.group_count_ = group_count;
  a.endpoint_count_ = endpoint_count;
  a.chunks_.assign(chunks.begin(), chunks.end());
  a.placements_.resize(chunks.size());

  std::uint32_t max_key = 0;
  for (const auto& c : chunks) max_key = std::max(max_key, c.key_id);
  a.key_ranges_.assign(chunks.empty() ? 0 : max_key + 1, {});
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const auto& c = chunks[i];
    if (i > 0 && std::tie(chunks[i - 1].key_id, chunks[i - 1].chunk_index) >= std::tie(c.key_id, c.chunk_index)) {
      throw Error(ErrorCode::kInvalidSpec, "chunks are not in (key_id, chunk_index) order");
    }
    auto& range = a.key_ranges_[c.key_id];
    if (c.chunk_index == 0) range.first = i;
    if (range.first + c.chunk_index != i || range.count != c.chunk_index) {
      throw Error(ErrorCode::kInvalidSpec, "chunks of key " + std::to_string(c.key_id) + " are not contiguous");
    }
    ++range.count;
  }

  std::vector<std::size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), 0);
  // Input order already is (key_id, chunk_index), so a stable sort by size
  // yields the required tie-break.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return chunks[l].byte_size > chunks[r].byte_size; });

  using Slot = std::pair<std::uint64_t, std::uint32_t>;  // (load, core)
  std::priority_queue<Slot, std::vector<Slot>, std::greater<>> least_loaded;
  for (std::uint32_t core = 0; core < core_count; ++core) least_loaded.push({0, core});

  for (std::size_t idx : order) {
    auto [load, core] = least_loaded.top();
    least_loaded.pop();
    a.placements_[idx] = {core, a.endpoint_of_core(core), a.group_of_core(core)};
    least_loaded.push({load + chunks[idx].byte_size, core});
  }
  return a;
}

std::uint32_t endpoint_for_chunk(const ChunkAssignment& a, std::uint32_t key_id, std::uint32_t chunk_index) {
  return a.placement(key_id, chunk_index).endpoint;
}

std::vector<CoreLoad> load_report(const ChunkAssignment& a) {
  std::vector<CoreLoad> loads(a.core_count());
  for (std::size_t i = 0; i < a.chunks().size(); ++i) {
    auto& l = loads[a.placements()[i].core_shard];
    ++l.chunk_count;
    l.byte_load += a.chunks()[i].byte_size;
  }
  return loads;
}

}  // namespace phub
