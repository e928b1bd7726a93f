#include "patchguard/error.hpp"

namespace patchguard {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io error";
    case ErrorKind::corrupt_header: return "corrupt header";
    case ErrorKind::truncated_payload: return "truncated payload";
    case ErrorKind::dimension_mismatch: return "dimension mismatch";
    case ErrorKind::non_finite_value: return "non-finite value";
    case ErrorKind::invalid_sample: return "invalid sample";
    case ErrorKind::invalid_config: return "invalid config";
    case ErrorKind::cannot_split: return "cannot split";
    case ErrorKind::numeric_overflow: return "numeric overflow";
    case ErrorKind::undefined_metric: return "undefined metric";
    case ErrorKind::format: return "format error";
    case ErrorKind::version_mismatch: return "version mismatch";
  }
  return "error";
}

}  // namespace patchguard
