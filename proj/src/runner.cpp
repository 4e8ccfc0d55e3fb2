#include "monoflow/runner.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "monoflow/diagnostics.hpp"
#include "monoflow/io.hpp"

namespace monoflow {

using nlohmann::json;
namespace fs = std::filesystem;

LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("MONOFLOW_LOG");
        if (!e) return LogLevel::Warn;
        std::string s(e);
        if (s == "error") return LogLevel::Error;
        if (s == "warn") return LogLevel::Warn;
        if (s == "info") return LogLevel::Info;
        if (s == "debug") return LogLevel::Debug;
        return LogLevel::Warn;
    }();
    return lvl;
}

void log_msg(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << "\n";
}

namespace {

std::vector<double> resolve_series(const Trajectory& traj, const PairTrajectory* pair,
                                   const std::string& name, std::vector<double>& t_out) {
    t_out = traj.series_time();
    if (name == "D") return traj.series_D();
    if (name == "M") {
        std::vector<double> y;
        for (const auto& s : traj.samples) y.push_back(s.M);
        return y;
    }
    if (name == "w2") {
        if (!pair) throw ConfigError("fit series 'w2' needs a compare block");
        t_out = pair->times;
        return pair->w2;
    }
    if (name.size() >= 2 && name[0] == 'F') {
        int idx = std::stoi(name.substr(1)) - 1;
        if (idx < 0 || idx >= static_cast<int>(traj.samples.front().energies.size()))
            throw ConfigError("fit series '" + name + "' out of range");
        return traj.series_energy(idx);
    }
    throw ConfigError("unknown fit series '" + name + "'");
}

json run_fits(const RunConfig& cfg, const Trajectory& traj, const PairTrajectory* pair) {
    json fits = json::object();
    for (const auto& fr : cfg.fits) {
        std::vector<double> t;
        std::vector<double> y = resolve_series(traj, pair, fr.series, t);
        if (fr.normalize) {
            if (y.empty() || y.front() == 0.0)
                throw RuntimeError("fit '" + fr.name + "': cannot normalize by zero");
            double y0 = y.front();
            for (double& v : y) v /= y0;
        }
        RateFit fit = fit_rate(t, y, fr.t_start, fr.t_end, fr.envelope);
        fits[fr.name] = {{"series", fr.series},       {"rate", fit.rate},
                         {"intercept", fit.intercept}, {"r_squared", fit.r_squared},
                         {"window", {fit.t_start, fit.t_end}},
                         {"points", fit.points_used},  {"envelope", fr.envelope}};
        log_msg(LogLevel::Info, "fit " + fr.name + ": rate=" + std::to_string(fit.rate) +
                                    " r2=" + std::to_string(fit.r_squared));
    }
    return fits;
}

void write_snapshots(const RunConfig& cfg, const Trajectory& traj, const fs::path& dir) {
    for (std::size_t k = 0; k < traj.snapshots.size(); ++k) {
        const SystemState& st = traj.snapshots[k];
        for (int i = 0; i < st.n(); ++i) {
            if (st.species[i].dirac) continue;
            std::string base = "snap_" + std::to_string(i) + "_" + std::to_string(k);
            write_density_csv((dir / (base + ".csv")).string(), st.species[i].field);
            write_density_raw((dir / base).string(), st.species[i].field);
        }
    }
    (void)cfg;
}

void write_plots(const RunConfig& cfg, const Trajectory& traj, const PairTrajectory* pair,
                 const fs::path& dir) {
    if (!cfg.emit_svg) return;
    auto t = traj.series_time();
    std::vector<SvgSeries> en;
    for (int i = 0; i < cfg.spec.n(); ++i)
        en.push_back({"F_" + std::to_string(i + 1), t, traj.series_energy(i)});
    write_svg_plot((dir / "energies.svg").string(), en, false);
    write_svg_plot((dir / "lyapunov.svg").string(), {{"D", t, traj.series_D()}}, true);
    if (pair)
        write_svg_plot((dir / "contraction.svg").string(),
                       {{"joint W2", pair->times, pair->w2}}, true);
}

json traj_summary(const Trajectory& traj) {
    const TrajectorySample& last = traj.samples.back();
    return {{"t_final", last.t},
            {"final_energies", last.energies},
            {"final_D", last.D},
            {"final_M", last.M},
            {"final_boundary_mass", last.boundary_mass},
            {"max_mass_drift", traj.max_mass_drift},
            {"min_density", traj.min_density},
            {"max_boundary_mass", traj.max_boundary_mass},
            {"steps", traj.steps}};
}

}  // namespace

json run_simulate(const RunConfig& cfg, const std::string& outdir) {
    fs::create_directories(outdir);
    const fs::path dir(outdir);
    write_json_file((dir / "config_resolved.json").string(), cfg.resolved);

    const auto wall0 = std::chrono::steady_clock::now();
    json summary;
    summary["name"] = cfg.name;

    if (cfg.initial_b) {
        PairTrajectory pair = simulate_pair(cfg.spec, cfg.initial, *cfg.initial_b, cfg.sim);
        write_trajectory_csv((dir / "trajectory.csv").string(), pair.a, cfg.spec.n(),
                             cfg.sim.w2_reference.has_value());
        write_trajectory_csv((dir / "trajectory_b.csv").string(), pair.b, cfg.spec.n(),
                             cfg.sim.w2_reference.has_value());
        {
            std::string csv = "t,w2\n";
            for (std::size_t k = 0; k < pair.times.size(); ++k) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", pair.times[k], pair.w2[k]);
                csv += buf;
            }
            write_text_file((dir / "contraction.csv").string(), csv);
        }
        summary["trajectory_a"] = traj_summary(pair.a);
        summary["trajectory_b"] = traj_summary(pair.b);
        summary["w2_final"] = pair.w2.back();
        summary["fits"] = run_fits(cfg, pair.a, &pair);
        write_plots(cfg, pair.a, &pair, dir);
        if (std::max(pair.a.max_boundary_mass, pair.b.max_boundary_mass) >
            cfg.sim.boundary_warn)
            log_msg(LogLevel::Warn, "boundary mass exceeded the warn threshold");
    } else {
        Trajectory traj = simulate(cfg.spec, cfg.initial, cfg.sim);
        write_trajectory_csv((dir / "trajectory.csv").string(), traj, cfg.spec.n(),
                             cfg.sim.w2_reference.has_value());
        if (cfg.sim.record_allocations && cfg.spec.allocation)
            write_allocations_csv((dir / "allocations.csv").string(), traj,
                                  static_cast<int>(cfg.spec.allocation->populations.size()),
                                  static_cast<int>(cfg.spec.allocation->providers.size()));
        write_snapshots(cfg, traj, dir);
        summary["trajectory"] = traj_summary(traj);
        summary["fits"] = run_fits(cfg, traj, nullptr);
        write_plots(cfg, traj, nullptr, dir);
        if (traj.max_boundary_mass > cfg.sim.boundary_warn)
            log_msg(LogLevel::Warn, "boundary mass exceeded the warn threshold");
    }

    const auto wall1 = std::chrono::steady_clock::now();
    summary["runtime_seconds"] =
        std::chrono::duration<double>(wall1 - wall0).count();
    write_json_file((dir / "summary.json").string(), summary);
    return summary;
}

json run_estimate(const RunConfig& cfg, int pairs_override, long long seed_override,
                  const std::string& outdir) {
    if (!cfg.estimate)
        throw ConfigError("config has no 'estimate' block");
    EstimateOptions eo = *cfg.estimate;
    if (pairs_override > 0) eo.pairs = pairs_override;
    if (seed_override >= 0) eo.seed = static_cast<std::uint64_t>(seed_override);

    EnergyVelocitySystem sys(cfg.spec);
    MonotonicityReport rep = estimate_lambda(sys, eo.sampler, eo.pairs, eo.seed, eo.coarsen,
                                             eo.claim, eo.claim_tol);
    json out = report_to_json(rep);
    out["name"] = cfg.name;
    out["seed"] = eo.seed;
    if (!outdir.empty()) {
        fs::create_directories(outdir);
        write_json_file((fs::path(outdir) / "report.json").string(), out);
        write_json_file((fs::path(outdir) / "config_resolved.json").string(), cfg.resolved);
    }
    return out;
}

}  // namespace monoflow
