#pragma once

#include <optional>
#include <string>
#include <vector>

#include "monoflow/dynamics.hpp"
#include "monoflow/energy.hpp"
#include "monoflow/monotone.hpp"
#include "monoflow/state.hpp"

#include <json.hpp>

namespace monoflow {

struct FitRequest {
    std::string name;     // label in the summary
    std::string series;   // "w2", "D", "M", or "F<i>"
    double t_start = 0.0, t_end = 0.0;
    bool envelope = false;
    bool normalize = false;  // divide the series by its first sample
};

struct EstimateOptions {
    SamplerOptions sampler;
    int pairs = 100;
    std::uint64_t seed = 0;
    std::size_t coarsen = 1024;
    std::optional<double> claim;
    double claim_tol = 1e-6;
};

// Fully resolved run configuration.
struct RunConfig {
    std::string name = "run";
    std::uint64_t seed = 0;
    SimOptions sim;
    bool emit_svg = false;

    EnergySpec spec;
    SystemState initial;
    std::optional<SystemState> initial_b;  // two-IC contraction harness

    std::optional<EstimateOptions> estimate;
    std::vector<FitRequest> fits;

    nlohmann::json resolved;  // config with defaults filled in
};

// Parse and validate a config document. Throws ConfigError with field context.
RunConfig load_config(const nlohmann::json& doc);
RunConfig load_config_file(const std::string& path);

// Density construction from a named analytic shape, normalized to unit mass.
DensityField build_initial_density(const GridPtr& grid, const nlohmann::json& shape);

}  // namespace monoflow
