#include "kvsink/error.hpp"

namespace kvsink {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Shape: return "shape_error";
    case ErrorCode::Layout: return "layout_error";
    case ErrorCode::Config: return "configuration_error";
    case ErrorCode::Calibration: return "calibration_error";
    case ErrorCode::Index: return "index_error";
    case ErrorCode::State: return "state_error";
    case ErrorCode::Format: return "format_error";
    case ErrorCode::Numeric: return "numeric_failure";
    case ErrorCode::BiasUndefined: return "bias_undefined";
    case ErrorCode::DiscoveryFailure: return "discovery_failure";
    case ErrorCode::DegenerateRow: return "degenerate_row";
    case ErrorCode::Usage: return "usage_error";
    case ErrorCode::Io: return "io_error";
  }
  return "unknown_error";
}

}  // namespace kvsink
