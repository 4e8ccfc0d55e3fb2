#pragma once

#include <optional>
#include <vector>

#include "monoflow/energy.hpp"
#include "monoflow/state.hpp"

namespace monoflow {

struct TrajectorySample {
    double t = 0.0;
    std::vector<double> energies;       // F_i per species
    double D = 0.0;                     // velocity Lyapunov functional
    double M = 0.0;                     // half total second moment
    double boundary_mass = 0.0;
    std::optional<double> w2_ref;       // joint W2 to a reference state
    std::vector<double> allocation;     // flattened a_ij rows, when recorded
};

struct Trajectory {
    std::vector<TrajectorySample> samples;
    std::vector<double> snapshot_times;
    std::vector<SystemState> snapshots;

    // run-wide monitors
    double max_mass_drift = 0.0;        // max_i |mass_i - 1| seen at records
    double min_density = 0.0;           // most negative value before clamping
    double max_boundary_mass = 0.0;
    long long steps = 0;

    std::vector<double> series_time() const;
    std::vector<double> series_D() const;
    std::vector<double> series_energy(int i) const;
    std::vector<double> series_w2_ref() const;
};

struct SimOptions {
    double T = 1.0;
    double dt_cap = 1e-2;
    double cfl_safety = 0.4;
    int record_every = 100;
    int snapshot_count = 0;
    bool record_allocations = false;
    std::optional<SystemState> w2_reference;
    std::size_t w2_coarsen = 1024;
    double boundary_warn = 1e-6;
    double boundary_error = 1e-3;
};

// dt = safety * min over grid species/axes of h/(2 max|v| + eps), further
// capped by the parabolic bound when diffusion strengths are nonzero and by
// dt_cap (which is returned when nothing moves).
double cfl_dt(const SystemState& st, const Velocities& vel, double safety,
              double dt_cap, const std::vector<double>& diffusion_strengths = {});

// One positivity-preserving upwind step; Dirac species take an Euler step.
// min_density_out, when given, receives the most negative post-step value
// before the roundoff clamp.
SystemState fv_step(const SystemState& st, const Velocities& vel, double dt,
                    double* min_density_out = nullptr);

Trajectory simulate(const EnergySpec& spec, SystemState initial, const SimOptions& opts);

// Two trajectories of the same system advanced in lockstep (shared dt),
// recording the joint W2 distance between them.
struct PairTrajectory {
    std::vector<double> times;
    std::vector<double> w2;
    Trajectory a, b;
};

PairTrajectory simulate_pair(const EnergySpec& spec, SystemState init_a, SystemState init_b,
                             const SimOptions& opts);

}  // namespace monoflow
