#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phub/model.hpp"

namespace phub {

struct ChunkPlacement {
  std::uint32_t core_shard = 0;
  std::uint32_t endpoint = 0;
  std::uint32_t core_group = 0;

  bool operator==(const ChunkPlacement&) const = default;
};

struct CoreLoad {
  std::uint64_t chunk_count = 0;
  std::uint64_t byte_load = 0;

  bool operator==(const CoreLoad&) const = default;
};

/// Stable chunk -> (core shard, endpoint, core group) map.
///
/// Cores are split into `group_count` equal contiguous groups, as are
/// endpoints. Inside a group, local core i binds to local endpoint
/// i mod (endpoints per group), so a chunk's core and endpoint always share
/// a group. Chunks are placed longest-first on the least-loaded core.
class ChunkAssignment {
 public:
  ChunkAssignment() = default;

  const std::vector<ChunkDescriptor>& chunks() const { return chunks_; }
  const std::vector<ChunkPlacement>& placements() const { return placements_; }

  std::uint32_t core_count() const { return core_count_; }
  std::uint32_t group_count() const { return group_count_; }
  std::uint32_t endpoint_count() const { return endpoint_count_; }

  /// Index into chunks()/placements(); throws Error(kLookup) if absent.
  std::size_t chunk_ordinal(std::uint32_t key_id, std::uint32_t chunk_index) const;
  const ChunkPlacement& placement(std::uint32_t key_id, std::uint32_t chunk_index) const {
    return placements_[chunk_ordinal(key_id, chunk_index)];
  }

  std::uint32_t endpoint_of_core(std::uint32_t core) const;
  std::uint32_t group_of_core(std::uint32_t core) const { return core / (core_count_ / group_count_); }

  bool operator==(const ChunkAssignment&) const = default;

 private:
  friend ChunkAssignment assign_chunks(std::span<const ChunkDescriptor>, std::uint32_t, std::uint32_t,
                                       std::uint32_t);

  std::vector<ChunkDescriptor> chunks_;
  std::vector<ChunkPlacement> placements_;
  struct KeyRange {
    std::size_t first = 0;
    std::size_t count = 0;
    bool operator==(const KeyRange&) const = default;
  };
  std::vector<KeyRange> key_ranges_;
  std::uint32_t core_count_ = 0;
  std::uint32_t group_count_ = 0;
  std::uint32_t endpoint_count_ = 0;
};

/// `chunks` must be in (key_id, chunk_index) order with dense key ids, as
/// produced by partition_model (a subset of whole keys is allowed).
ChunkAssignment assign_chunks(std::span<const ChunkDescriptor> chunks, std::uint32_t core_count,
                              std::uint32_t group_count, std::uint32_t endpoint_count);

std::uint32_t endpoint_for_chunk(const ChunkAssignment& a, std::uint32_t key_id, std::uint32_t chunk_index);

std::vector<CoreLoad> load_report(const ChunkAssignment& a);

}  // namespace phub
