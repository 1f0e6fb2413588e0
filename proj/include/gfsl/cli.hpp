#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace gfsl {

struct CliOptions {
    std::string command;
    std::string config_path;
    std::vector<std::string> sets;  // dot.path=value overrides, applied in order
    // Direct flags; empty/negative means "not given". Flags win over --set.
    std::string seed, variant, shot, way, tasks, threads, out, data, checkpoint, init, baseline,
        gamma, report;
    bool from_scratch = false;
    bool single_domain = false;
};

/// File config + --set overrides + direct flags over the defaults; validates
/// every field path and requires an explicit seed for every command but
/// `report`.
nlohmann::json build_effective_config(const CliOptions& opts);

/// Dispatches one command over an effective config; throws on failure.
void run_command(const std::string& command, const nlohmann::json& config);

/// Full entry point: parse argv, dispatch, map errors to exit codes
/// (0 ok, 2 config, 3 data, 4 numeric guard).
int run_cli(int argc, const char* const* argv);

}  // namespace gfsl
