#pragma once

#include <filesystem>
#include <string_view>

#include "json.hpp"

namespace eralab {

/// Reads the TOML subset used by experiment configs into a JSON object:
/// comments, [tables], [[arrays of tables]], bare/quoted/dotted keys, basic and
/// literal strings, integers, floats (incl. inf/nan), booleans, arrays and
/// inline tables. Dates and multi-line strings are not supported.
/// Throws ConfigError with the line number on malformed input.
nlohmann::json parse_toml(std::string_view text);

/// Throws ConfigError if the file cannot be read.
nlohmann::json parse_toml_file(const std::filesystem::path& path);

} // namespace eralab
