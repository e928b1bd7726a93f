#pragma once

// Shortest round-trip text for floating-point values, used by every text
// output that must re-parse bit-exactly (run.meta, history.csv).

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace patchguard::text {

std::string shortest(double v);
std::string shortest(float v);
// Fixed decimals, e.g. the 4-decimal metric columns.
std::string fixed(double v, int decimals);

std::optional<double> parse_double(std::string_view s);
std::optional<float> parse_float(std::string_view s);
std::optional<std::uint64_t> parse_u64(std::string_view s);

std::string_view trim(std::string_view s);

}  // namespace patchguard::text
