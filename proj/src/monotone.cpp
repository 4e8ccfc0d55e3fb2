#include "monoflow/monotone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace monoflow {

PairingResult dissipation_pairing(const std::vector<SpeciesVelocity>& v0,
                                  const std::vector<SpeciesVelocity>& v1,
                                  const std::vector<TransportPlan>& plans) {
    if (v0.size() != plans.size() || v1.size() != plans.size())
        throw ConfigError("dissipation_pairing: species count mismatch");
    PairingResult res;
    double a[2] = {0.0, 0.0}, b[2] = {0.0, 0.0};
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const TransportPlan& plan = plans[i];
        const int d = plan.source.dim;
        for (const auto& e : plan.entries) {
            if (e.mass <= 0.0) continue;
            const double* x = plan.source.point(e.row);
            const double* y = plan.target.point(e.col);
            v0[i].eval(x, a);
            v1[i].eval(y, b);
            double inner = 0.0, d2 = 0.0;
            for (int c = 0; c < d; ++c) {
                double dx = x[c] - y[c];
                inner += dx * (a[c] - b[c]);
                d2 += dx * dx;
            }
            res.pairing -= e.mass * inner;
            res.sqdist += e.mass * d2;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// LiftedVelocitySystem
// ---------------------------------------------------------------------------
LiftedVelocitySystem::LiftedVelocitySystem(std::vector<int> dims, TupleField u,
                                           std::vector<GridPtr> grids)
    : dims_(std::move(dims)), u_(std::move(u)), grids_(std::move(grids)) {
    offsets_.resize(dims_.size());
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        offsets_[i] = total_dim_;
        total_dim_ += dims_[i];
    }
    if (!grids_.empty() && grids_.size() != dims_.size())
        throw ConfigError("lifted system: one grid slot per species required");
}

void LiftedVelocitySystem::lifted_velocity(const SystemState& st, int i, const double* xi,
                                           double* out) const {
    const int d = dims_[i];
    for (int a = 0; a < d; ++a) out[a] = 0.0;
    std::vector<double> x(total_dim_, 0.0);
    std::vector<double> u(total_dim_, 0.0);
    for (int a = 0; a < d; ++a) x[offsets_[i] + a] = xi[a];

    // iterate the product measure over the other species
    std::vector<int> others;
    for (int j = 0; j < n(); ++j)
        if (j != i) others.push_back(j);

    std::function<void(std::size_t, double)> walk = [&](std::size_t k, double mass) {
        if (k == others.size()) {
            u_(x.data(), u.data());
            for (int a = 0; a < d; ++a) out[a] -= mass * u[offsets_[i] + a];
            return;
        }
        const int j = others[k];
        const SpeciesState& s = st.species[j];
        if (s.dirac) {
            for (int a = 0; a < dims_[j]; ++a) x[offsets_[j] + a] = s.point[a];
            walk(k + 1, mass);
            return;
        }
        const Grid& g = *s.field.grid;
        const double vol = g.cell_volume();
        double xc[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < g.size(); ++c) {
            double m = s.field.values[c] * vol;
            if (m == 0.0) continue;
            g.cell_center(c, xc);
            for (int a = 0; a < dims_[j]; ++a) x[offsets_[j] + a] = xc[a];
            walk(k + 1, mass * m);
        }
    };
    walk(0, 1.0);
}

Velocities LiftedVelocitySystem::assemble(const SystemState& st) const {
    auto held = std::make_shared<SystemState>(st);  // keep alive inside closures
    Velocities out;
    out.v.resize(st.n());
    for (int i = 0; i < st.n(); ++i) {
        SpeciesVelocity& v = out.v[i];
        v.dirac = st.species[i].dirac;
        if (v.dirac) v.vec.assign(dims_[i], 0.0);
        v.fn = [this, held, i](const double* x, double* o) {
            lifted_velocity(*held, i, x, o);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------
namespace {

DensityField gaussian_on_grid(const GridPtr& grid, const std::vector<double>& mean,
                              const std::vector<double>& sigma2) {
    const Grid& g = *grid;
    DensityField f;
    f.grid = grid;
    f.values.resize(g.size());
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g.size(); ++c) {
        g.cell_center(c, x);
        double e = 0.0;
        for (int a = 0; a < g.dim(); ++a) e += sq(x[a] - mean[a]) / (2.0 * sigma2[a]);
        f.values[c] = std::exp(-e);
    }
    double m = f.mass();
    if (!(m > 0.0)) throw RuntimeError("sampler produced a zero-mass Gaussian");
    for (double& v : f.values) v /= m;
    return f;
}

DensityField mixture_on_grid(const GridPtr& grid, Rng& rng, const SamplerOptions& so) {
    const Grid& g = *grid;
    auto draw = [&](std::vector<double>& mean, std::vector<double>& s2) {
        mean.resize(g.dim());
        s2.resize(g.dim());
        for (int a = 0; a < g.dim(); ++a) {
            double half = 0.5 * (g.upper(a) - g.lower(a));
            double mid = 0.5 * (g.upper(a) + g.lower(a));
            mean[a] = mid + so.mean_frac * half * (2.0 * rng.uniform() - 1.0);
            double s = half * rng.uniform(so.sigma_lo, so.sigma_hi);
            s2[a] = s * s;
        }
    };
    std::vector<double> m1, s1, m2, s2;
    draw(m1, s1);
    draw(m2, s2);
    double w = rng.uniform(0.3, 0.7);
    DensityField a = gaussian_on_grid(grid, m1, s1);
    DensityField b = gaussian_on_grid(grid, m2, s2);
    for (std::size_t c = 0; c < a.values.size(); ++c)
        a.values[c] = w * a.values[c] + (1.0 - w) * b.values[c];
    return a;
}

}  // namespace

SystemState sample_state(const VelocitySystem& sys, const SamplerOptions& so, Rng& rng) {
    SystemState st;
    st.species.resize(sys.n());
    for (int i = 0; i < sys.n(); ++i) {
        if (so.family == SamplerFamily::DiracTuples || !sys.grid(i)) {
            std::vector<double> p(sys.dim(i));
            if (sys.grid(i)) {
                const Grid& g = *sys.grid(i);
                for (int a = 0; a < g.dim(); ++a) {
                    double half = 0.5 * (g.upper(a) - g.lower(a));
                    double mid = 0.5 * (g.upper(a) + g.lower(a));
                    p[a] = mid + so.mean_frac * half * (2.0 * rng.uniform() - 1.0);
                }
            } else {
                for (int a = 0; a < sys.dim(i); ++a)
                    p[a] = so.dirac_box * (2.0 * rng.uniform() - 1.0);
            }
            st.species[i] = SpeciesState::make_dirac(std::move(p));
            continue;
        }
        GridPtr grid = sys.grid(i);
        if (so.family == SamplerFamily::GridMixtures) {
            st.species[i] = SpeciesState::make_grid(mixture_on_grid(grid, rng, so));
        } else {
            const Grid& g = *grid;
            std::vector<double> mean(g.dim()), s2(g.dim());
            for (int a = 0; a < g.dim(); ++a) {
                double half = 0.5 * (g.upper(a) - g.lower(a));
                double mid = 0.5 * (g.upper(a) + g.lower(a));
                mean[a] = mid + so.mean_frac * half * (2.0 * rng.uniform() - 1.0);
                double s = half * rng.uniform(so.sigma_lo, so.sigma_hi);
                s2[a] = s * s;
            }
            st.species[i] = SpeciesState::make_grid(gaussian_on_grid(grid, mean, s2));
        }
    }
    return st;
}

MonotonicityReport estimate_lambda(const VelocitySystem& sys, const SamplerOptions& sampler,
                                   int K, std::uint64_t seed, std::size_t coarsen_to,
                                   std::optional<double> claim, double claim_tol) {
    if (K < 1) throw ConfigError("estimate_lambda: need at least one pair");
    if (sampler.family == SamplerFamily::DiracTuples && !sys.dirac_admissible())
        throw ConfigError(
            "estimate_lambda: Dirac sampling not admissible for diffusion-bearing systems");

    MonotonicityReport rep;
    rep.single_plan_caveat = !sys.dirac_admissible();
    rep.claim = claim;

    Rng master(seed);
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
        std::uint64_t pair_seed = master.next_u64();
        Rng prng(pair_seed);
        SystemState s0 = sample_state(sys, sampler, prng);
        SystemState s1 = sample_state(sys, sampler, prng);

        std::vector<TransportPlan> plans;
        plans.reserve(sys.n());
        double sq_total = 0.0;
        for (int i = 0; i < sys.n(); ++i) {
            DiscreteMeasure m0 = measure_of_species(s0.species[i], coarsen_to);
            DiscreteMeasure m1 = measure_of_species(s1.species[i], coarsen_to);
            W2Result w2 = w2_exact(m0, m1);
            sq_total += sq(w2.distance);
            plans.push_back(std::move(w2.plan));
        }
        if (sq_total <= 1e-14) {
            ++rep.skipped;
            continue;
        }
        Velocities v0 = sys.assemble(s0);
        Velocities v1 = sys.assemble(s1);
        PairingResult pr = dissipation_pairing(v0.v, v1.v, plans);
        if (pr.sqdist <= 1e-14) {
            ++rep.skipped;
            continue;
        }
        PairRecord rec;
        rec.seed = pair_seed;
        rec.dissipation = pr.pairing;
        rec.sqdist = pr.sqdist;
        rec.ratio = pr.pairing / pr.sqdist;
        rep.pairs.push_back(rec);
        if (rec.ratio < best) {
            best = rec.ratio;
            rep.worst = rec;
        }
    }
    rep.num_pairs = static_cast<int>(rep.pairs.size());
    if (rep.num_pairs == 0)
        throw RuntimeError("estimate_lambda: all sampled pairs were degenerate");
    rep.lambda_hat = best;
    rep.worst_description = "pair seed " + std::to_string(rep.worst.seed);
    if (claim) rep.violation = rep.lambda_hat < *claim - claim_tol;
    return rep;
}

// ---------------------------------------------------------------------------
// Lambda matrix
// ---------------------------------------------------------------------------
void LambdaMatrix::validate() const {
    const std::size_t n = c.size();
    if (alpha.size() != n) throw ConfigError("lambda matrix: alpha must be n x n");
    for (std::size_t i = 0; i < n; ++i) {
        if (alpha[i].size() != n) throw ConfigError("lambda matrix: alpha must be n x n");
        if (alpha[i][i] != 0.0)
            throw ConfigError("lambda matrix: alpha must have zero diagonal");
        for (double v : alpha[i])
            if (v < 0.0) throw ConfigError("lambda matrix: alpha must be nonnegative");
    }
}

double lambda_matrix_bound(const LambdaMatrix& lm) {
    lm.validate();
    const std::size_t n = lm.c.size();
    std::vector<std::vector<double>> L(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        L[i][i] = lm.c[i];
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) L[i][j] = -lm.alpha[i][j];
    }
    return min_eig_sym_part(L, 1e-10);
}

// ---------------------------------------------------------------------------
// Kernel Hessian bounds
// ---------------------------------------------------------------------------
double kernel_hessian_bound(const RadialProfile& prof, double radius_max,
                            long long samples) {
    if (!(radius_max > 0.0) || samples < 2)
        throw ConfigError("kernel_hessian_bound: bad radius grid");
    const double dr = radius_max / static_cast<double>(samples - 1);

    if (prof.family == RadialProfile::Family::Morse) {
        // displayed expressions: lambda_m1 = inf phi, lambda_m2 = min(inf r^2 psi, 0);
        // both tend to 0 in the tail
        double m1 = 0.0, m2 = 0.0;
        for (long long s = 0; s < samples; ++s) {
            double r = s * dr;
            m1 = std::min(m1, prof.phi(r));
            m2 = std::min(m2, r * r * prof.psi(r));
        }
        return m1 + m2;
    }

    // eigenvalues of phi I + psi zz^T: tangential phi, radial phi + r^2 psi
    double lo = std::numeric_limits<double>::infinity();
    for (long long s = 0; s < samples; ++s) {
        double r = s * dr;
        double tang = prof.phi(r);
        double rad = tang + r * r * prof.psi(r);
        lo = std::min(lo, std::min(tang, rad));
    }
    // analytic tail limits
    switch (prof.family) {
        case RadialProfile::Family::Quadratic:
            lo = std::min(lo, 1.0);
            break;
        case RadialProfile::Family::Power:
            if (prof.k == 2.0)
                lo = std::min(lo, 1.0);
            else if (prof.k < 2.0)
                lo = std::min(lo, 0.0);
            break;
        case RadialProfile::Family::Quartic:
        case RadialProfile::Family::PowerLaw:
            break;  // tail diverges upward
        case RadialProfile::Family::Morse:
            break;
    }
    return lo;
}

// ---------------------------------------------------------------------------
// Second-order quadratic form
// ---------------------------------------------------------------------------
SecondOrderForm second_order_form(const EnergySpec& spec, const SystemState& st,
                                  const std::vector<SpeciesVelocity>& w) {
    if (static_cast<int>(w.size()) != st.n())
        throw ConfigError("second_order_form: one field per species required");
    for (const auto& sp : spec.species)
        for (const auto& t : sp.terms) {
            if (t->is_diffusive())
                throw ConfigError("second_order_form: diffusion/KL terms are unsupported");
            if (!t->second_order_ready())
                throw ConfigError("second_order_form: term '" + t->type_name() +
                                  "' lacks closed-form Hessians");
        }

    EvalContext ctx(spec, st);
    SecondOrderForm out;

    // cache support points, masses and w values per species
    struct Support {
        std::vector<double> pts;    // n*d
        std::vector<double> mass;
        std::vector<double> wval;   // n*d
        int d = 0;
    };
    std::vector<Support> sup(st.n());
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        Support& S = sup[i];
        S.d = s.dim();
        if (s.dirac) {
            S.pts = s.point;
            S.mass = {1.0};
        } else {
            const Grid& g = *s.field.grid;
            double x[2] = {0.0, 0.0};
            for (std::size_t c = 0; c < g.size(); ++c) {
                double m = s.field.values[c] * g.cell_volume();
                if (m == 0.0) continue;
                g.cell_center(c, x);
                for (int a = 0; a < S.d; ++a) S.pts.push_back(x[a]);
                S.mass.push_back(m);
            }
        }
        S.wval.resize(S.mass.size() * S.d);
        double buf[2] = {0.0, 0.0};
        for (std::size_t k = 0; k < S.mass.size(); ++k) {
            w[i].eval(&S.pts[k * S.d], buf);
            for (int a = 0; a < S.d; ++a) S.wval[k * S.d + a] = buf[a];
            out.norm += S.mass[k] * sqnorm(buf, S.d);
        }
    }

    // diagonal blocks
    for (int i = 0; i < st.n(); ++i) {
        const Support& S = sup[i];
        SmallMat H = SmallMat::zero(S.d, S.d);
        for (std::size_t k = 0; k < S.mass.size(); ++k) {
            std::fill(H.a.begin(), H.a.end(), 0.0);
            for (const auto& t : spec.species[i].terms)
                if (t->involves(i)) t->add_diag_hessian(ctx, i, &S.pts[k * S.d], H);
            const double* wv = &S.wval[k * S.d];
            double q = 0.0;
            for (int r = 0; r < S.d; ++r)
                for (int c = 0; c < S.d; ++c) q += wv[r] * H.at(r, c) * wv[c];
            out.lhs += S.mass[k] * q;
        }
    }

    // cross blocks: row i of the second-variation operator comes from F_i
    for (int i = 0; i < st.n(); ++i) {
        for (int j = 0; j < st.n(); ++j) {
            std::vector<const Term*> terms;
            for (const auto& t : spec.species[i].terms)
                if (t->has_cross_block(i, j)) terms.push_back(t.get());
            if (terms.empty()) continue;
            const Support& Si = sup[i];
            const Support& Sj = sup[j];
            SmallMat H = SmallMat::zero(Si.d, Sj.d);
            for (std::size_t k = 0; k < Si.mass.size(); ++k) {
                const double* xi = &Si.pts[k * Si.d];
                const double* wi = &Si.wval[k * Si.d];
                for (std::size_t l = 0; l < Sj.mass.size(); ++l) {
                    const double* xj = &Sj.pts[l * Sj.d];
                    const double* wj = &Sj.wval[l * Sj.d];
                    std::fill(H.a.begin(), H.a.end(), 0.0);
                    for (const Term* t : terms) t->add_cross_hessian(ctx, i, j, xi, xj, H);
                    double q = 0.0;
                    for (int r = 0; r < Si.d; ++r)
                        for (int c = 0; c < Sj.d; ++c) q += wi[r] * H.at(r, c) * wj[c];
                    out.lhs += Si.mass[k] * Sj.mass[l] * q;
                }
            }
        }
    }
    return out;
}

}  // namespace monoflow
