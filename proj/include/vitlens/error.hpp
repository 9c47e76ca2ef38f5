#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vitlens {

enum class ErrorCode {
  dimension,
  bad_magic,
  manifest_parse,
  bad_version,
  bad_dtype,
  duplicate_name,
  payload_overrun,
  overlap,
  length_mismatch,
  missing_tensor,
  shape_conflict,
  invalid_config,
  invalid_argument,
  inapplicable,
  empty_sequence,
  missing_capture,
  insufficient_shots,
  checksum_mismatch,
  io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::manifest_parse: return "manifest_parse";
    case ErrorCode::bad_version: return "bad_version";
    case ErrorCode::bad_dtype: return "bad_dtype";
    case ErrorCode::duplicate_name: return "duplicate_name";
    case ErrorCode::payload_overrun: return "payload_overrun";
    case ErrorCode::overlap: return "overlap";
    case ErrorCode::length_mismatch: return "length_mismatch";
    case ErrorCode::missing_tensor: return "missing_tensor";
    case ErrorCode::shape_conflict: return "shape_conflict";
    case ErrorCode::invalid_config: return "invalid_config";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::inapplicable: return "inapplicable";
    case ErrorCode::empty_sequence: return "empty_sequence";
    case ErrorCode::missing_capture: return "missing_capture";
    case ErrorCode::insufficient_shots: return "insufficient_shots";
    case ErrorCode::checksum_mismatch: return "checksum_mismatch";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace vitlens
