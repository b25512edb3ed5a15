#pragma once

#include <string>

#include "levi/config.hpp"
#include "levi/eval.hpp"

namespace levi::app {

// Exit-code contract shared by the command layer, the C api and the CLI:
// 0 success, 1 computational failure, 2 configuration error.
inline constexpr int kOk = 0;
inline constexpr int kRunError = 1;
inline constexpr int kConfigError = 2;

struct CmdResult {
    int code = kOk;
    std::string text;
    std::string csv_path;
    std::string summary_path;
};

// Output directory priority: explicit override, then the LEVI_OUT_DIR
// environment variable, then the config's output.dir.
std::string resolve_output_dir(const std::string& config_dir, const std::string& override_dir);

// prints the exact fixture table and verifies it against the expected values
CmdResult cmd_fixture();

// runs the randomized per-op gradient audit
CmdResult cmd_gradcheck(double tolerance = 1e-4, int instances_per_op = 20,
                        std::uint64_t seed = 20260809);

CmdResult cmd_run(const std::string& config_path, const std::string& out_dir_override, int jobs,
                  const RunLogger& log = {});

CmdResult cmd_layer_sweep(const std::string& config_path, const std::string& out_dir_override, int jobs,
                          const RunLogger& log = {});

// re-aggregates the record csv files already present in a directory
CmdResult cmd_report(const std::string& dir);

} // namespace levi::app
