#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace clusterbreak {

enum class ErrorCode {
  invalid_parameter,
  invalid_shape,
  shape_mismatch,
  length_mismatch,
  io_error,
  empty_class,
  degenerate_clustering,
  invalid_target,
  singular_covariance,
  insufficient_data,
  degenerate_variance,
  unknown_token,
  payload_too_large,
  empty_album,
  not_grouped,
  rate_limited,
  service_error,
  config_validation,
  missing_field,
  schema_mismatch,
};

std::string_view to_string(ErrorCode code);
/// Inverse of to_string; nullopt for unknown names.
std::optional<ErrorCode> error_code_from_string(std::string_view name);

/// Base exception for everything the library throws. The code is stable and
/// is what callers (CLI, HTTP layer, Python bindings) dispatch on.
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

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace clusterbreak
