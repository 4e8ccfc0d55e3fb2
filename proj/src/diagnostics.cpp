#include "monoflow/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "monoflow/grid.hpp"

namespace monoflow {

double lyapunov_D(const Velocities& vel, const SystemState& st) {
    double acc = 0.0;
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        if (s.dirac) {
            std::vector<double> v(s.dim(), 0.0);
            vel.v[i].eval(s.point.data(), v.data());
            acc += 0.5 * sqnorm(v.data(), s.dim());
            continue;
        }
        const Grid& g = *s.field.grid;
        const VectorField& f = vel.v[i].field;
        double sp = 0.0;
        for (std::size_t c = 0; c < g.size(); ++c) {
            double v2 = sq(f.comp[0][c]);
            if (g.dim() == 2) v2 += sq(f.comp[1][c]);
            sp += v2 * s.field.values[c];
        }
        acc += 0.5 * sp * g.cell_volume();
    }
    return acc;
}

double lyapunov_D(const EnergySpec& spec, const SystemState& st) {
    Velocities vel = spec.assemble_velocity(st);
    return lyapunov_D(vel, st);
}

double second_moment(const SystemState& st) {
    double acc = 0.0;
    for (const auto& s : st.species) {
        if (s.dirac) {
            acc += 0.5 * sqnorm(s.point.data(), s.dim());
            continue;
        }
        const Grid& g = *s.field.grid;
        double sp = 0.0;
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < g.size(); ++c) {
            g.cell_center(c, x);
            sp += sqnorm(x, g.dim()) * s.field.values[c];
        }
        acc += 0.5 * sp * g.cell_volume();
    }
    return acc;
}

double nash_residual(const EnergySpec& spec, const SystemState& st, double mass_floor_rel) {
    double worst = 0.0;
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        if (s.dirac) {
            auto v = spec.dirac_velocity(st, i);  // v = -grad_h F
            worst = std::max(worst, std::sqrt(sqnorm(v.data(), s.dim())));
            continue;
        }
        const Grid& g = *s.field.grid;
        std::vector<double> fv = spec.first_variation(st, i);
        VectorField grad_fv = gradient(fv, s.field.grid);
        double rho_max = 0.0;
        for (double r : s.field.values) rho_max = std::max(rho_max, r);
        const double floor = mass_floor_rel * rho_max;
        double sp = 0.0;
        for (std::size_t c = 0; c < g.size(); ++c) {
            if (s.field.values[c] < floor) continue;
            double g2 = sq(grad_fv.comp[0][c]);
            if (g.dim() == 2) g2 += sq(grad_fv.comp[1][c]);
            sp += g2 * s.field.values[c];
        }
        worst = std::max(worst, std::sqrt(sp * g.cell_volume()));
    }
    return worst;
}

double mollifier_constant(const EnergySpec& spec, double tau) {
    if (!(tau > 0.0)) throw ConfigError("mollifier_constant: tau must be positive");
    SystemState st;
    st.species.resize(spec.n());
    for (int i = 0; i < spec.n(); ++i) {
        const SpeciesSpec& sp = spec.species[i];
        if (sp.dirac || !sp.grid) {
            st.species[i] = SpeciesState::make_dirac(std::vector<double>(sp.dim, 0.0));
            continue;
        }
        const Grid& g = *sp.grid;
        DensityField f{sp.grid, std::vector<double>(g.size())};
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < g.size(); ++c) {
            g.cell_center(c, x);
            f.values[c] = std::exp(-sqnorm(x, g.dim()) / (2.0 * tau));
        }
        double m = f.mass();
        if (!(m > 0.0)) throw RuntimeError("mollifier carries no mass on the grid");
        for (double& v : f.values) v /= m;
        st.species[i] = SpeciesState::make_grid(std::move(f));
    }
    return std::sqrt(2.0 * lyapunov_D(spec, st));
}

RateFit fit_rate(std::span<const double> t, std::span<const double> y,
                 double t_start, double t_end, bool envelope) {
    if (t.size() != y.size()) throw ConfigError("fit_rate: series length mismatch");
    if (!(t_end > t_start)) throw ConfigError("fit_rate: empty window");

    std::vector<double> ts, ys;
    if (!envelope) {
        for (std::size_t k = 0; k < t.size(); ++k) {
            if (t[k] < t_start || t[k] > t_end) continue;
            if (!(y[k] > 0.0))
                throw ConfigError("fit_rate: series must be positive on the window");
            ts.push_back(t[k]);
            ys.push_back(y[k]);
        }
    } else {
        // local maxima of |y| within the window
        for (std::size_t k = 1; k + 1 < t.size(); ++k) {
            if (t[k] < t_start || t[k] > t_end) continue;
            double a = std::abs(y[k - 1]), m = std::abs(y[k]), b = std::abs(y[k + 1]);
            if (m > 0.0 && m >= a && m > b) {
                ts.push_back(t[k]);
                ys.push_back(m);
            }
        }
    }
    if (ts.size() < 3)
        throw ConfigError("fit_rate: need at least 3 points in the window, got " +
                          std::to_string(ts.size()));

    const std::size_t n = ts.size();
    double st = 0.0, sl = 0.0, stt = 0.0, stl = 0.0, sll = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        double L = std::log(ys[k]);
        st += ts[k];
        sl += L;
        stt += ts[k] * ts[k];
        stl += ts[k] * L;
        sll += L * L;
    }
    const double den = n * stt - st * st;
    if (den == 0.0) throw ConfigError("fit_rate: degenerate time values");
    const double slope = (n * stl - st * sl) / den;
    const double intercept = (sl - slope * st) / n;

    double ss_res = 0.0, ss_tot = 0.0;
    const double mean_l = sl / n;
    for (std::size_t k = 0; k < n; ++k) {
        double L = std::log(ys[k]);
        ss_res += sq(L - (intercept + slope * ts[k]));
        ss_tot += sq(L - mean_l);
    }

    RateFit fit;
    fit.rate = -slope;
    fit.intercept = intercept;
    fit.r_squared = ss_tot > 0.0 ? std::max(0.0, 1.0 - ss_res / ss_tot) : 1.0;
    fit.t_start = t_start;
    fit.t_end = t_end;
    fit.points_used = static_cast<int>(n);
    return fit;
}

}  // namespace monoflow
