#include "phub/aggregation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "phub/error.hpp"

namespace phub {

void validate(const OptimizerConfig& cfg) {
  if (!std::isfinite(cfg.learning_rate) || cfg.learning_rate <= 0.0f) {
    throw Error(ErrorCode::kInvalidConfig, "learning rate must be finite and positive");
  }
}

AggregationBuffer::AggregationBuffer(const ChunkDescriptor& chunk, std::uint32_t worker_count,
                                     AggregationMode mode, std::uint32_t iteration)
    : chunk_(chunk),
      worker_count_(worker_count),
      mode_(mode),
      iteration_(iteration),
      accumulator_(chunk.element_count, 0.0f),
      contributed_((worker_count + 63) / 64, 0) {
  if (worker_count == 0) throw Error(ErrorCode::kInvalidConfig, "aggregation needs at least one worker");
  if (mode_ == AggregationMode::kDeterministic) {
    staging_.assign(worker_count, std::vector<float>(chunk.element_count));
  }
}

bool AggregationBuffer::contributed(std::uint32_t worker_id) const {
  return worker_id < worker_count_ && ((contributed_[worker_id / 64] >> (worker_id % 64)) & 1u);
}

AcceptStatus AggregationBuffer::accept_gradient(std::uint32_t worker_id, std::uint32_t iteration,
                                                std::span<const float> payload) {
  if (worker_id >= worker_count_) {
    throw Error(ErrorCode::kProtocol, "worker id " + std::to_string(worker_id) + " out of range");
  }
  if (iteration != iteration_) {
    throw Error(ErrorCode::kStaleIteration, "push for iteration " + std::to_string(iteration) +
                                                " but chunk is at iteration " + std::to_string(iteration_));
  }
  if (payload.size() != chunk_.element_count) {
    throw Error(ErrorCode::kProtocol, "payload has " + std::to_string(payload.size()) + " elements, chunk has " +
                                          std::to_string(chunk_.element_count));
  }
  if (contributed(worker_id)) {
    throw Error(ErrorCode::kDuplicatePush, "worker " + std::to_string(worker_id) + " already pushed iteration " +
                                               std::to_string(iteration));
  }

  if (mode_ == AggregationMode::kFast) {
    for (std::size_t i = 0; i < payload.size(); ++i) accumulator_[i] += payload[i];
  } else {
    std::copy(payload.begin(), payload.end(), staging_[worker_id].begin());
  }
  contributed_[worker_id / 64] |= std::uint64_t{1} << (worker_id % 64);
  ++contributions_;
  return complete() ? AcceptStatus::kComplete : AcceptStatus::kPartial;
}

std::span<const float> AggregationBuffer::finalize_sum() {
  if (!complete()) {
    throw Error(ErrorCode::kIncompleteAggregation, std::to_string(contributions_) + " of " +
                                                       std::to_string(worker_count_) + " contributions present");
  }
  if (mode_ == AggregationMode::kDeterministic && !finalized_) {
    std::copy(staging_[0].begin(), staging_[0].end(), accumulator_.begin());
    for (std::uint32_t w = 1; w < worker_count_; ++w) {
      const auto& slot = staging_[w];
      for (std::size_t i = 0; i < accumulator_.size(); ++i) accumulator_[i] += slot[i];
    }
  }
  finalized_ = true;
  return accumulator_;
}

void AggregationBuffer::mark_applied() {
  if (applied_) {
    throw Error(ErrorCode::kProtocol, "optimizer already applied for iteration " + std::to_string(iteration_));
  }
  applied_ = true;
  ++applied_updates_;
}

void AggregationBuffer::reset_for_iteration(std::uint32_t next_iteration) {
  if (!complete()) {
    throw Error(ErrorCode::kIncompleteAggregation, "reset of chunk with " + std::to_string(contributions_) +
                                                       " of " + std::to_string(worker_count_) + " contributions");
  }
  std::fill(accumulator_.begin(), accumulator_.end(), 0.0f);
  std::fill(contributed_.begin(), contributed_.end(), 0);
  contributions_ = 0;
  finalized_ = false;
  applied_ = false;
  iteration_ = next_iteration;
}

void apply_sgd(std::span<float> weights, std::span<const float> grad_sum, const OptimizerConfig& cfg,
               std::uint32_t worker_count) {
  if (weights.size() != grad_sum.size()) {
    throw Error(ErrorCode::kProtocol, "weight and gradient lengths differ");
  }
  if (worker_count == 0) throw Error(ErrorCode::kInvalidConfig, "worker count must be at least 1");
  const float lr = cfg.learning_rate;
  const float divisor = cfg.average_gradients ? static_cast<float>(worker_count) : 1.0f;

  auto updated = [&](std::size_t i) {
    const float g = cfg.average_gradients ? grad_sum[i] / divisor : grad_sum[i];
    return weights[i] - lr * g;
  };
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(updated(i))) {
      throw Error(ErrorCode::kNumericFault, "non-finite weight at element " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = updated(i);
}

}  // namespace phub
