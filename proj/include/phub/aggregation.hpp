#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "phub/model.hpp"

namespace phub {

enum class AggregationMode { kFast, kDeterministic };

struct OptimizerConfig {
  float learning_rate = 0.05f;
  bool average_gradients = true;
};

void validate(const OptimizerConfig& cfg);

enum class AcceptStatus { kPartial, kComplete };

/// Accumulation state for one chunk, owned by exactly one core shard.
///
/// FAST sums payloads as they arrive. DETERMINISTIC stages every payload and
/// folds them at completion in ascending worker id order, so the result is
/// independent of arrival order.
class AggregationBuffer {
 public:
  AggregationBuffer(const ChunkDescriptor& chunk, std::uint32_t worker_count, AggregationMode mode,
                    std::uint32_t iteration = 0);

  AcceptStatus accept_gradient(std::uint32_t worker_id, std::uint32_t iteration, std::span<const float> payload);

  /// Reduced gradient for the current iteration; valid until reset.
  std::span<const float> finalize_sum();

  /// Records the optimizer step for this epoch; a second call before reset throws.
  void mark_applied();

  void reset_for_iteration(std::uint32_t next_iteration);

  bool complete() const { return contributions_ == worker_count_; }
  bool contributed(std::uint32_t worker_id) const;
  std::uint32_t contribution_count() const { return contributions_; }
  std::uint32_t iteration() const { return iteration_; }
  std::uint64_t applied_updates() const { return applied_updates_; }
  const ChunkDescriptor& chunk() const { return chunk_; }
  AggregationMode mode() const { return mode_; }

 private:
  ChunkDescriptor chunk_;
  std::uint32_t worker_count_;
  AggregationMode mode_;
  std::uint32_t iteration_;
  std::vector<float> accumulator_;
  std::vector<std::uint64_t> contributed_;
  std::uint32_t contributions_ = 0;
  std::vector<std::vector<float>> staging_;
  bool finalized_ = false;
  bool applied_ = false;
  std::uint64_t applied_updates_ = 0;
};

/// w <- w - lr * g, where g is grad_sum / worker_count when averaging.
/// Throws Error(kNumericFault) and leaves `weights` untouched if any result
/// is not finite.
void apply_sgd(std::span<float> weights, std::span<const float> grad_sum, const OptimizerConfig& cfg,
               std::uint32_t worker_count);

}  // namespace phub
