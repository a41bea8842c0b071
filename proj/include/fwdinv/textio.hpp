// Round-trip number formatting and parsing for the text file formats.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace fwdinv {

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double v);
/// Fixed number of significant digits, for human-facing output.
std::string format_double(double v, int precision);

double parse_double(std::string_view s);
int parse_int(std::string_view s);
std::uint64_t parse_u64(std::string_view s);

std::string trim(std::string_view s);

}  // namespace fwdinv
