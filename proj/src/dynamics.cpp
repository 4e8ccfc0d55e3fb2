#include "monoflow/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "monoflow/diagnostics.hpp"
#include "monoflow/transport.hpp"

namespace monoflow {

std::vector<double> Trajectory::series_time() const {
    std::vector<double> t;
    t.reserve(samples.size());
    for (const auto& s : samples) t.push_back(s.t);
    return t;
}
std::vector<double> Trajectory::series_D() const {
    std::vector<double> y;
    y.reserve(samples.size());
    for (const auto& s : samples) y.push_back(s.D);
    return y;
}
std::vector<double> Trajectory::series_energy(int i) const {
    std::vector<double> y;
    y.reserve(samples.size());
    for (const auto& s : samples) y.push_back(s.energies[i]);
    return y;
}
std::vector<double> Trajectory::series_w2_ref() const {
    std::vector<double> y;
    y.reserve(samples.size());
    for (const auto& s : samples) y.push_back(s.w2_ref.value_or(0.0));
    return y;
}

double cfl_dt(const SystemState& st, const Velocities& vel, double safety,
              double dt_cap, const std::vector<double>& diffusion_strengths) {
    if (!(safety > 0.0 && safety <= 1.0))
        throw ConfigError("cfl: safety must lie in (0, 1]");
    constexpr double eps = 1e-12;
    double dt = dt_cap;
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        if (s.dirac) continue;
        const Grid& g = *s.field.grid;
        if (!vel.v[i].dirac && !vel.v[i].field.all_finite())
            throw RuntimeError("cfl: velocity field has NaN/Inf for species " +
                               std::to_string(i));
        for (int a = 0; a < g.dim(); ++a) {
            double vmax = vel.v[i].field.max_abs(a);
            dt = std::min(dt, safety * g.spacing(a) / (2.0 * vmax + eps));
        }
        if (i < static_cast<int>(diffusion_strengths.size()) && diffusion_strengths[i] > 0.0) {
            double h2 = sq(g.spacing(0));
            for (int a = 1; a < g.dim(); ++a) h2 = std::min(h2, sq(g.spacing(a)));
            dt = std::min(dt, safety * h2 /
                                  (2.0 * g.dim() * diffusion_strengths[i] + eps));
        }
    }
    return dt;
}

namespace {

// upwind flux sweep along one axis; divergence accumulated into div
void sweep_axis(const Grid& g, int axis, const std::vector<double>& rho,
                const std::vector<double>& v, std::vector<double>& div) {
    const double h = g.spacing(axis);
    if (g.dim() == 1) {
        const int n = g.cells(0);
        double flux_prev = 0.0;  // no-flux left boundary
        for (int j = 0; j < n; ++j) {
            double flux = 0.0;
            if (j < n - 1) {
                double u = 0.5 * (v[j] + v[j + 1]);
                flux = u > 0.0 ? u * rho[j] : u * rho[j + 1];
            }
            div[j] += (flux - flux_prev) / h;
            flux_prev = flux;
        }
        return;
    }
    const int nx = g.cells(0), ny = g.cells(1);
    if (axis == 0) {
        for (int iy = 0; iy < ny; ++iy) {
            const std::size_t row = g.index(0, iy);
            double flux_prev = 0.0;
            for (int ix = 0; ix < nx; ++ix) {
                double flux = 0.0;
                if (ix < nx - 1) {
                    double u = 0.5 * (v[row + ix] + v[row + ix + 1]);
                    flux = u > 0.0 ? u * rho[row + ix] : u * rho[row + ix + 1];
                }
                div[row + ix] += (flux - flux_prev) / h;
                flux_prev = flux;
            }
        }
    } else {
        for (int ix = 0; ix < nx; ++ix) {
            double flux_prev = 0.0;
            for (int iy = 0; iy < ny; ++iy) {
                const std::size_t c = g.index(ix, iy);
                double flux = 0.0;
                if (iy < ny - 1) {
                    const std::size_t cn = g.index(ix, iy + 1);
                    double u = 0.5 * (v[c] + v[cn]);
                    flux = u > 0.0 ? u * rho[c] : u * rho[cn];
                }
                div[c] += (flux - flux_prev) / h;
                flux_prev = flux;
            }
        }
    }
}

}  // namespace

SystemState fv_step(const SystemState& st, const Velocities& vel, double dt,
                    double* min_density_out) {
    SystemState out = st;
    out.t = st.t + dt;
    double min_rho = 0.0;
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        SpeciesState& so = out.species[i];
        if (s.dirac) {
            const auto& v = vel.v[i];
            std::vector<double> dv(s.dim(), 0.0);
            v.eval(s.point.data(), dv.data());
            for (int a = 0; a < s.dim(); ++a) so.point[a] = s.point[a] + dt * dv[a];
            continue;
        }
        const Grid& g = *s.field.grid;
        std::vector<double> div(g.size(), 0.0);
        for (int a = 0; a < g.dim(); ++a)
            sweep_axis(g, a, s.field.values, vel.v[i].field.comp[a], div);
        auto& nv = so.field.values;
        for (std::size_t c = 0; c < nv.size(); ++c) {
            nv[c] = s.field.values[c] - dt * div[c];
            if (nv[c] < 0.0) {
                min_rho = std::min(min_rho, nv[c]);
                if (nv[c] < -1e-13) {
                    std::ostringstream msg;
                    msg << "fv_step: density went negative (" << nv[c] << ") for species "
                        << i << " at t=" << out.t << "; CFL condition violated";
                    throw RuntimeError(msg.str());
                }
                nv[c] = 0.0;  // roundoff clamp
            }
        }
    }
    if (min_density_out) *min_density_out = min_rho;
    return out;
}

namespace {

TrajectorySample record_sample(const EnergySpec& spec, const SystemState& st,
                               const SimOptions& opts) {
    TrajectorySample smp;
    smp.t = st.t;
    EvalContext ctx(spec, st);
    smp.energies.resize(st.n());
    for (int i = 0; i < st.n(); ++i) smp.energies[i] = spec.energy_value_ctx(ctx, i);
    smp.D = lyapunov_D(spec, st);
    smp.M = second_moment(st);
    double bm = 0.0;
    for (const auto& s : st.species)
        if (!s.dirac) bm = std::max(bm, boundary_mass(s.field));
    smp.boundary_mass = bm;
    if (opts.w2_reference)
        smp.w2_ref = joint_w2(st, *opts.w2_reference, opts.w2_coarsen);
    if (opts.record_allocations && spec.allocation) {
        auto a = spec.allocation_weights(st);
        for (const auto& row : a)
            smp.allocation.insert(smp.allocation.end(), row.begin(), row.end());
    }
    return smp;
}

void update_monitors(Trajectory& traj, const SystemState& st, const SimOptions& opts) {
    for (const auto& s : st.species) {
        if (s.dirac) continue;
        traj.max_mass_drift = std::max(traj.max_mass_drift, std::abs(s.field.mass() - 1.0));
        double bm = boundary_mass(s.field);
        traj.max_boundary_mass = std::max(traj.max_boundary_mass, bm);
        if (bm > opts.boundary_error)
            throw RuntimeError("boundary mass " + std::to_string(bm) +
                               " exceeds hard limit at t=" + std::to_string(st.t) +
                               "; enlarge the domain box");
    }
}

}  // namespace

Trajectory simulate(const EnergySpec& spec, SystemState initial, const SimOptions& opts) {
    if (!(opts.T > 0.0)) throw ConfigError("simulate: T must be positive");
    for (const auto& s : initial.species)
        if (!s.dirac) s.field.validate(1e-8);

    Trajectory traj;
    traj.samples.push_back(record_sample(spec, initial, opts));
    update_monitors(traj, initial, opts);

    if (opts.snapshot_count > 0) {
        traj.snapshot_times.push_back(initial.t);
        traj.snapshots.push_back(initial);
    }
    const double snap_interval =
        opts.snapshot_count > 0 ? opts.T / opts.snapshot_count : 0.0;
    double next_snap = snap_interval;

    SystemState st = std::move(initial);
    std::vector<double> diff(st.n(), 0.0);
    long long step = 0;
    const double t_end = opts.T;
    while (st.t < t_end - 1e-12) {
        Velocities vel = spec.assemble_velocity(st);
        for (int i = 0; i < st.n(); ++i) diff[i] = spec.diffusion_strength(st, i);
        double dt = cfl_dt(st, vel, opts.cfl_safety, opts.dt_cap, diff);
        dt = std::min(dt, t_end - st.t);
        if (dt < 1e-12 * opts.T)
            throw RuntimeError("simulate: time step collapsed at t=" +
                               std::to_string(st.t));
        double min_rho = 0.0;
        st = fv_step(st, vel, dt, &min_rho);
        traj.min_density = std::min(traj.min_density, min_rho);
        ++step;

        const bool final_step = st.t >= t_end - 1e-12;
        if (step % opts.record_every == 0 || final_step) {
            traj.samples.push_back(record_sample(spec, st, opts));
            update_monitors(traj, st, opts);
        }
        if (opts.snapshot_count > 0 && (st.t >= next_snap - 1e-12 || final_step)) {
            traj.snapshot_times.push_back(st.t);
            traj.snapshots.push_back(st);
            next_snap += snap_interval;
        }
    }
    traj.steps = step;
    return traj;
}

PairTrajectory simulate_pair(const EnergySpec& spec, SystemState init_a, SystemState init_b,
                             const SimOptions& opts) {
    if (!(opts.T > 0.0)) throw ConfigError("simulate_pair: T must be positive");
    PairTrajectory out;
    SystemState a = std::move(init_a), b = std::move(init_b);

    auto record = [&](const SystemState& sa, const SystemState& sb) {
        out.times.push_back(sa.t);
        out.w2.push_back(joint_w2(sa, sb, opts.w2_coarsen));
        out.a.samples.push_back(record_sample(spec, sa, opts));
        out.b.samples.push_back(record_sample(spec, sb, opts));
        update_monitors(out.a, sa, opts);
        update_monitors(out.b, sb, opts);
    };
    record(a, b);

    std::vector<double> diff_a(a.n(), 0.0), diff_b(b.n(), 0.0);
    long long step = 0;
    while (a.t < opts.T - 1e-12) {
        Velocities va = spec.assemble_velocity(a);
        Velocities vb = spec.assemble_velocity(b);
        for (int i = 0; i < a.n(); ++i) {
            diff_a[i] = spec.diffusion_strength(a, i);
            diff_b[i] = spec.diffusion_strength(b, i);
        }
        double dt = std::min(cfl_dt(a, va, opts.cfl_safety, opts.dt_cap, diff_a),
                             cfl_dt(b, vb, opts.cfl_safety, opts.dt_cap, diff_b));
        dt = std::min(dt, opts.T - a.t);
        double mr_a = 0.0, mr_b = 0.0;
        a = fv_step(a, va, dt, &mr_a);
        b = fv_step(b, vb, dt, &mr_b);
        out.a.min_density = std::min(out.a.min_density, mr_a);
        out.b.min_density = std::min(out.b.min_density, mr_b);
        ++step;
        if (step % opts.record_every == 0 || a.t >= opts.T - 1e-12) record(a, b);
    }
    out.a.steps = out.b.steps = step;
    return out;
}

}  // namespace monoflow
