#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace patchguard {

enum class ErrorKind {
  io,
  corrupt_header,
  truncated_payload,
  dimension_mismatch,
  non_finite_value,
  invalid_sample,
  invalid_config,
  cannot_split,
  numeric_overflow,
  undefined_metric,
  format,
  version_mismatch,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace patchguard
