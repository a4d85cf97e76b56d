#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace revcal {

inline constexpr const char* kToolVersion = "0.3.0";

const std::vector<std::string>& subcommand_names();

// Parses a config document. Syntax errors are reported with line and column.
nlohmann::json parse_config(const std::string& text, const std::string& origin = "config");

// Runs one subcommand. `config` may be a plain config object or a manifest
// written by an earlier run (its resolved config is reused). `overrides`
// holds flag values (seed, threads, out) applied on top. Returns the
// manifest, which is also written to <out>/manifest.json.
nlohmann::json run_subcommand(const std::string& name, const nlohmann::json& config,
                              const nlohmann::json& overrides = nlohmann::json::object());

}  // namespace revcal
