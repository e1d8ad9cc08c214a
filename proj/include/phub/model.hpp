#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace phub {

inline constexpr std::size_t kElementWidth = sizeof(float);
inline constexpr std::size_t kDefaultChunkBytes = 32768;

struct KeySpec {
  std::uint32_t key_id = 0;
  std::uint64_t element_count = 0;

  std::uint64_t byte_size() const { return element_count * kElementWidth; }
  bool operator==(const KeySpec&) const = default;
};

/// Keyed parameter space. Key ids are dense, 0..K-1, in construction order.
struct ModelSpec {
  std::vector<KeySpec> keys;
  std::uint64_t total_bytes = 0;

  std::size_t key_count() const { return keys.size(); }
  std::uint64_t total_elements() const { return total_bytes / kElementWidth; }
  bool operator==(const ModelSpec&) const = default;
};

struct ChunkDescriptor {
  std::uint32_t key_id = 0;
  std::uint32_t chunk_index = 0;
  std::uint64_t element_offset = 0;
  std::uint64_t element_count = 0;
  std::uint64_t byte_size = 0;

  bool operator==(const ChunkDescriptor&) const = default;
};

ModelSpec build_model_spec(std::span<const std::uint64_t> key_element_counts);

/// Splits every key into chunks of at most `chunk_bytes`. Chunks never span
/// keys; only the last chunk of a key may be short.
std::vector<ChunkDescriptor> partition_model(const ModelSpec& spec, std::uint64_t chunk_bytes);

/// FNV-1a over the key element counts; exchanged at registration so both
/// sides can detect a spec mismatch.
std::uint64_t spec_hash(const ModelSpec& spec);

/// Splits `total_elements` into `key_count` contiguous keys whose sizes
/// differ by at most one element (larger keys first).
std::vector<std::uint64_t> split_evenly(std::uint64_t total_elements, std::size_t key_count);

/// Per-key flat parameter arrays.
class ModelStore {
 public:
  ModelStore() = default;
  explicit ModelStore(const ModelSpec& spec, float init = 0.0f);

  std::span<float> key(std::uint32_t key_id) { return values_.at(key_id); }
  std::span<const float> key(std::uint32_t key_id) const { return values_.at(key_id); }

  std::span<float> chunk(const ChunkDescriptor& c);
  std::span<const float> chunk(const ChunkDescriptor& c) const;

  std::size_t key_count() const { return values_.size(); }

  /// Concatenation of all keys in id order.
  std::vector<float> flatten() const;
  void assign_flat(std::span<const float> flat);

  std::uint64_t iteration = 0;

  bool operator==(const ModelStore&) const = default;

 private:
  std::vector<std::vector<float>> values_;
};

}  // namespace phub
