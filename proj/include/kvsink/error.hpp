#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kvsink {

enum class ErrorCode {
  Shape,
  Layout,
  Config,
  Calibration,
  Index,
  State,
  Format,
  Numeric,
  BiasUndefined,
  DiscoveryFailure,
  DegenerateRow,
  Usage,
  Io,
};

/// Stable machine-readable name, e.g. "format_error".
std::string_view error_code_name(ErrorCode code);

/// Every failure raised by the library. `context` carries small key/value
/// facts (byte offsets, expected vs actual sizes) for the error JSON.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message,
        std::map<std::string, std::string> context = {})
      : std::runtime_error(message), code_(code), context_(std::move(context)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::map<std::string, std::string>& context() const noexcept { return context_; }

 private:
  ErrorCode code_;
  std::map<std::string, std::string> context_;
};

}  // namespace kvsink
