#include "phub/model.hpp"

#include <algorithm>
#include <string>

#include "phub/error.hpp"

namespace phub {

ModelSpec build_model_spec(std::span<const std::uint64_t> key_element_counts) {
  if (key_element_counts.empty()) {
    throw Error(ErrorCode::kInvalidSpec, "model has no keys");
  }
  ModelSpec spec;
  spec.keys.reserve(key_element_counts.size());
  for (std::size_t i = 0; i < key_element_counts.size(); ++i) {
    if (key_element_counts[i] == 0) {
      throw Error(ErrorCode::kInvalidSpec, "key " + std::to_string(i) + " has zero elements");
    }
    spec.keys.push_back({static_cast<std::uint32_t>(i), key_element_counts[i]});
    spec.total_bytes += key_element_counts[i] * kElementWidth;
  }
  return spec;
}

std::vector<ChunkDescriptor> partition_model(const ModelSpec& spec, std::uint64_t chunk_bytes) {
  if (chunk_bytes < kElementWidth || chunk_bytes % kElementWidth != 0) {
    throw Error(ErrorCode::kInvalidChunkSize,
                "chunk size " + std::to_string(chunk_bytes) + " is not a positive multiple of 4");
  }
  const std::uint64_t chunk_elems = chunk_bytes / kElementWidth;
  std::vector<ChunkDescriptor> chunks;
  for (const auto& key : spec.keys) {
    std::uint32_t index = 0;
    for (std::uint64_t off = 0; off < key.element_count; off += chunk_elems, ++index) {
      const std::uint64_t n = std::min(chunk_elems, key.element_count - off);
      chunks.push_back({key.key_id, index, off, n, n * kElementWidth});
    }
  }
  return chunks;
}

std::uint64_t spec_hash(const ModelSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(spec.keys.size());
  for (const auto& key : spec.keys) mix(key.element_count);
  return h;
}

std::vector<std::uint64_t> split_evenly(std::uint64_t total_elements, std::size_t key_count) {
  if (key_count == 0 || total_elements < key_count) {
    throw Error(ErrorCode::kInvalidSpec, "cannot split " + std::to_string(total_elements) +
                                             " elements into " + std::to_string(key_count) + " keys");
  }
  std::vector<std::uint64_t> sizes(key_count, total_elements / key_count);
  for (std::size_t i = 0; i < total_elements % key_count; ++i) ++sizes[i];
  return sizes;
}

ModelStore::ModelStore(const ModelSpec& spec, float init) {
  values_.reserve(spec.keys.size());
  for (const auto& key : spec.keys) values_.emplace_back(key.element_count, init);
}

std::span<float> ModelStore::chunk(const ChunkDescriptor& c) {
  return key(c.key_id).subspan(c.element_offset, c.element_count);
}

std::span<const float> ModelStore::chunk(const ChunkDescriptor& c) const {
  return key(c.key_id).subspan(c.element_offset, c.element_count);
}

std::vector<float> ModelStore::flatten() const {
  std::vector<float> flat;
  for (const auto& v : values_) flat.insert(flat.end(), v.begin(), v.end());
  return flat;
}

void ModelStore::assign_flat(std::span<const float> flat) {
  std::size_t off = 0;
  for (auto& v : values_) {
    if (off + v.size() > flat.size()) {
      throw Error(ErrorCode::kInvalidSpec, "flat model is shorter than the store");
    }
    std::copy_n(flat.begin() + off, v.size(), v.begin());
    off += v.size();
  }
  if (off != flat.size()) throw Error(ErrorCode::kInvalidSpec, "flat model is longer than the store");
}

}  // namespace phub
