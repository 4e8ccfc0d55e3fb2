#pragma once

// Shared helpers for unit and acceptance tests.

#include <cmath>
#include <vector>

#include "monoflow/energy.hpp"
#include "monoflow/state.hpp"

namespace monoflow::testsup {

inline DensityField gaussian_field(const GridPtr& grid, std::vector<double> mean,
                                   std::vector<double> var) {
    const Grid& g = *grid;
    DensityField f;
    f.grid = grid;
    f.values.resize(g.size());
    double x[2];
    for (std::size_t c = 0; c < g.size(); ++c) {
        g.cell_center(c, x);
        double e = 0.0;
        for (int a = 0; a < g.dim(); ++a) e += sq(x[a] - mean[a]) / (2.0 * var[a]);
        f.values[c] = std::exp(-e);
    }
    double m = f.mass();
    for (double& v : f.values) v /= m;
    return f;
}

// Forward-difference directional derivative of F_i with Richardson
// extrapolation at eps {1e-4, 1e-5}, compared against the inner product of
// the first variation with the perturbation. Returns the relative error.
// Perturbations are mass-preserving and keep the density positive.
inline double variational_error(const EnergySpec& spec, const SystemState& st, int i,
                                Rng& rng) {
    const SpeciesState& s = st.species[i];
    const Grid& g = *s.field.grid;

    // sigma = rho * (r - <r>_rho): zero total mass, relative size <= 1
    std::vector<double> r(g.size());
    for (double& v : r) v = 2.0 * rng.uniform() - 1.0;
    double rbar = 0.0;
    for (std::size_t c = 0; c < g.size(); ++c) rbar += r[c] * s.field.values[c];
    rbar *= g.cell_volume();
    std::vector<double> sigma(g.size());
    for (std::size_t c = 0; c < g.size(); ++c)
        sigma[c] = s.field.values[c] * (r[c] - rbar);

    // allocation weights are exogenous data; freeze them across evaluations
    EvalContext base_ctx(spec, st);
    const EvalContext::Allocation* frozen = nullptr;
    EvalContext::Allocation frozen_store;
    if (spec.allocation) {
        frozen_store = base_ctx.allocation();
        frozen = &frozen_store;
    }

    auto value_at = [&](double eps) {
        SystemState pert = st;
        auto& vals = pert.species[i].field.values;
        for (std::size_t c = 0; c < vals.size(); ++c) vals[c] += eps * sigma[c];
        EvalContext ctx(spec, pert);
        if (frozen) ctx.preset_allocation(*frozen);
        return spec.energy_value_ctx(ctx, i);
    };

    const double f0 = value_at(0.0);
    const double e1 = 1e-4, e2 = 1e-5;
    const double d1 = (value_at(e1) - f0) / e1;
    const double d2 = (value_at(e2) - f0) / e2;
    const double extrap = (e1 * d2 - e2 * d1) / (e1 - e2);

    std::vector<double> fv;
    EvalContext fv_ctx(spec, st);
    if (frozen) fv_ctx.preset_allocation(*frozen);
    spec.first_variation_into(fv_ctx, i, fv);
    double analytic = 0.0;
    for (std::size_t c = 0; c < fv.size(); ++c) analytic += fv[c] * sigma[c];
    analytic *= g.cell_volume();

    double scale = std::max(std::abs(analytic), 1e-8);
    return std::abs(extrap - analytic) / scale;
}

}  // namespace monoflow::testsup
