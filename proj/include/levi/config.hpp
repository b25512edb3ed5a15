#pragma once

#include <stdexcept>
#include <string>

#include "levi/eval.hpp"

namespace levi {

// Configuration problems carry their own exception type so callers can map
// them to the dedicated exit code.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Parses the flat `key = value` experiment configuration format (one pair
// per line, '#' comments). Unknown keys, malformed values and inconsistent
// combinations are rejected with the offending key and line number. The
// returned config carries every resolved value in its echo list.
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source_name);

// Reads and parses a config file; a missing file is a ConfigError naming the
// path.
ExperimentConfig load_experiment_config(const std::string& path);

} // namespace levi
