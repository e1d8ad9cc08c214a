#include "phub/error.hpp"

namespace phub {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidSpec: return "invalid-spec";
    case ErrorCode::kInvalidChunkSize: return "invalid-chunk-size";
    case ErrorCode::kInvalidConfig: return "invalid-config";
    case ErrorCode::kProtocol: return "protocol-error";
    case ErrorCode::kLookup: return "lookup-error";
    case ErrorCode::kDuplicatePush: return "duplicate-push";
    case ErrorCode::kStaleIteration: return "stale-iteration";
    case ErrorCode::kIncompleteAggregation: return "incomplete-aggregation";
    case ErrorCode::kNumericFault: return "numeric-fault";
    case ErrorCode::kInvalidBatch: return "invalid-batch";
    case ErrorCode::kQuantizationRange: return "quantization-range";
    case ErrorCode::kSwitchOverflow: return "switch-overflow";
    case ErrorCode::kTransport: return "transport-error";
    case ErrorCode::kRemote: return "remote-error";
    case ErrorCode::kIo: return "io-error";
  }
  return "unknown-error";
}

}  // namespace phub
