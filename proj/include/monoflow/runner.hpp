#pragma once

#include <string>

#include "monoflow/config.hpp"

#include <json.hpp>

namespace monoflow {

// MONOFLOW_LOG = error|warn|info|debug (default warn)
enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };
LogLevel log_level();
void log_msg(LogLevel lvl, const std::string& msg);

// Runs a simulation (or the two-IC contraction harness when the config has a
// `compare` block), writes all artifacts under outdir, returns the summary.
nlohmann::json run_simulate(const RunConfig& cfg, const std::string& outdir);

// Runs lambda estimation for the configured system; writes report.json.
nlohmann::json run_estimate(const RunConfig& cfg, int pairs_override, long long seed_override,
                            const std::string& outdir);

}  // namespace monoflow
