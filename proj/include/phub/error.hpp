#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace phub {

enum class ErrorCode {
  kInvalidSpec,
  kInvalidChunkSize,
  kInvalidConfig,
  kProtocol,
  kLookup,
  kDuplicatePush,
  kStaleIteration,
  kIncompleteAggregation,
  kNumericFault,
  kInvalidBatch,
  kQuantizationRange,
  kSwitchOverflow,
  kTransport,
  kRemote,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace phub
