#pragma once

#include <string>
#include <vector>

#include "monoflow/dynamics.hpp"
#include "monoflow/monotone.hpp"
#include "monoflow/transport.hpp"

#include <json.hpp>

namespace monoflow {

// Trajectory CSV columns: t, F_1..F_n, D, M, boundary_mass[, w2_ref]
void write_trajectory_csv(const std::string& path, const Trajectory& traj, int n_species,
                          bool with_w2);

// t, a_11..a_NM (row-major over populations x providers)
void write_allocations_csv(const std::string& path, const Trajectory& traj,
                           int populations, int providers);

// header: axis coordinates, then value per row
void write_density_csv(const std::string& path, const DensityField& f);

// raw little-endian float64 values plus a JSON sidecar describing the grid
void write_density_raw(const std::string& base_path, const DensityField& f);
DensityField read_density_raw(const std::string& base_path);

// source index, target index, mass triplets
void write_plan_csv(const std::string& path, const TransportPlan& plan);

void write_text_file(const std::string& path, const std::string& content);
void write_json_file(const std::string& path, const nlohmann::json& doc);

nlohmann::json report_to_json(const MonotonicityReport& rep);

// minimal polyline plot; y values <= 0 are dropped in log scale
struct SvgSeries {
    std::string label;
    std::vector<double> x, y;
};
void write_svg_plot(const std::string& path, const std::vector<SvgSeries>& series,
                    bool log_y);

}  // namespace monoflow
