#pragma once

#include <string_view>

#include <nlohmann/json.hpp>

namespace fedmob {

// Parses the TOML subset used by run config files into a JSON tree:
// comments, [section] and [a.b] headers, bare keys, strings, integers,
// floats, booleans, arrays (possibly spanning lines), and inline tables.
nlohmann::json parse_toml(std::string_view text);

} // namespace fedmob
