#include <doctest.h>

#include <cmath>

#include "monoflow/diagnostics.hpp"
#include "monoflow/dynamics.hpp"
#include "monoflow/transport.hpp"
#include "test_support.hpp"

using namespace monoflow;
using testsup::gaussian_field;

namespace {

EnergySpec spec_with(const GridPtr& g, std::vector<TermPtr> terms, int copies = 1) {
    EnergySpec spec;
    for (int i = 0; i < copies; ++i) {
        SpeciesSpec sp;
        sp.dim = g->dim();
        sp.grid = g;
        spec.species.push_back(std::move(sp));
    }
    for (auto& t : terms) spec.species[t->subject].terms.push_back(std::move(t));
    return spec;
}

Velocities constant_velocity(const SystemState& st, double u) {
    Velocities vel;
    vel.v.resize(st.n());
    for (int i = 0; i < st.n(); ++i) {
        const auto& s = st.species[i];
        vel.v[i].dirac = s.dirac;
        if (s.dirac) {
            vel.v[i].vec.assign(s.dim(), u);
        } else {
            vel.v[i].field.grid = s.field.grid;
            for (int a = 0; a < s.field.grid->dim(); ++a)
                vel.v[i].field.comp[a].assign(s.field.grid->size(), u);
        }
    }
    return vel;
}

}  // namespace

TEST_CASE("cfl formula") {
    auto g = build_grid({1, {0.0}, {4.0}, {8}});  // h = 0.5
    SystemState st;
    st.species = {SpeciesState::make_grid({g, std::vector<double>(8, 0.25)})};

    Velocities zero = constant_velocity(st, 0.0);
    CHECK(cfl_dt(st, zero, 0.5, 1e-2) == doctest::Approx(1e-2));  // cap when nothing moves

    Velocities five = constant_velocity(st, 5.0);
    CHECK(cfl_dt(st, five, 0.5, 1.0) == doctest::Approx(0.025).epsilon(1e-9));

    auto g2 = build_grid({1, {0.0}, {4.0}, {16}});  // halved h
    SystemState st2;
    st2.species = {SpeciesState::make_grid({g2, std::vector<double>(16, 0.25)})};
    Velocities five2 = constant_velocity(st2, 5.0);
    CHECK(cfl_dt(st2, five2, 0.5, 1.0) ==
          doctest::Approx(0.5 * cfl_dt(st, five, 0.5, 1.0)).epsilon(1e-9));

    // parabolic bound: h^2 scaling
    std::vector<double> diff = {2.0};
    CHECK(cfl_dt(st, zero, 0.5, 1.0, diff) ==
          doctest::Approx(0.5 * 0.25 / (2.0 * 1.0 * 2.0)).epsilon(1e-6));
}

TEST_CASE("zero velocity leaves the state unchanged bitwise") {
    auto g = build_grid({2, {-1.0, -1.0}, {1.0, 1.0}, {12, 12}});
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.2, -0.1}, {0.1, 0.15})),
                  SpeciesState::make_dirac({0.3, 0.4})};
    Velocities zero = constant_velocity(st, 0.0);
    SystemState out = fv_step(st, zero, 1e-3);
    CHECK(out.species[0].field.values == st.species[0].field.values);
    CHECK(out.species[1].point == st.species[1].point);
}

TEST_CASE("constant velocity advances the center of mass by u dt") {
    auto g = build_grid({1, {0.0}, {10.0}, {100}});
    DensityField blob{g, std::vector<double>(g->size(), 0.0)};
    for (int c = 30; c < 50; ++c) blob.values[c] = 1.0;
    double m = blob.mass();
    for (double& v : blob.values) v /= m;
    SystemState st;
    st.species = {SpeciesState::make_grid(blob)};

    auto com = [&](const SystemState& s) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g->size(); ++c)
            acc += g->axis_centers(0)[c] * s.species[0].field.values[c];
        return acc * g->cell_volume();
    };

    const double u = 0.7, dt = 0.02;  // CFL: dt < h/(2u) = 0.071
    double before = com(st);
    for (int k = 0; k < 10; ++k) st = fv_step(st, constant_velocity(st, u), dt);
    CHECK(std::abs(com(st) - before - 10 * u * dt) < 1e-10);
    CHECK(std::abs(st.species[0].field.mass() - 1.0) < 1e-13);
}

TEST_CASE("mass is conserved and positivity holds over many steps") {
    auto g = build_grid({1, {-4.0}, {4.0}, {64}});
    std::vector<TermPtr> terms;
    terms.push_back(make_potential(0, RadialProfile::named("quadratic", {})));
    terms.push_back(make_diffusion(0, 1.0, 0.5));
    EnergySpec spec = spec_with(g, std::move(terms));
    SystemState init;
    init.species = {SpeciesState::make_grid(gaussian_field(g, {1.5}, {0.08}))};
    SimOptions opts;
    opts.T = 1.0;
    opts.record_every = 50;
    spec.prepare(init);
    Trajectory traj = simulate(spec, init, opts);
    CHECK(traj.max_mass_drift < 1e-12);
    CHECK(traj.min_density >= -1e-13);
    CHECK(traj.steps > 100);
}

TEST_CASE("quadratic-entropy flow relaxes toward the discrete Gibbs state") {
    auto g = build_grid({1, {-5.0}, {5.0}, {64}});
    std::vector<TermPtr> terms;
    terms.push_back(make_potential(0, RadialProfile::named("quadratic", {})));
    terms.push_back(make_diffusion(0, 1.0, 1.0));
    EnergySpec spec = spec_with(g, std::move(terms));

    DensityField gibbs{g, std::vector<double>(g->size())};
    for (std::size_t c = 0; c < g->size(); ++c)
        gibbs.values[c] = std::exp(-0.5 * sq(g->axis_centers(0)[c]));
    double m = gibbs.mass();
    for (double& v : gibbs.values) v /= m;
    SystemState ref;
    ref.species = {SpeciesState::make_grid(gibbs)};

    SystemState init;
    init.species = {SpeciesState::make_grid(gaussian_field(g, {1.8}, {0.1}))};
    SimOptions opts;
    opts.T = 6.0;
    opts.record_every = 200;
    opts.w2_reference = ref;
    spec.prepare(init);
    Trajectory traj = simulate(spec, init, opts);

    auto w2s = traj.series_w2_ref();
    REQUIRE(w2s.size() >= 4);
    for (std::size_t k = 1; k < w2s.size(); ++k) CHECK(w2s[k] <= w2s[k - 1] + 1e-9);
    CHECK(w2s.back() < 0.05 * w2s.front());
}

TEST_CASE("contraction rate of the uncoupled quadratic flow matches lambda") {
    const double lambda = 1.5;
    auto g = build_grid({1, {-3.0}, {3.0}, {128}});
    std::vector<TermPtr> terms;
    terms.push_back(make_potential(0, RadialProfile::named("quadratic", {}), lambda));
    EnergySpec spec = spec_with(g, std::move(terms));

    SystemState a, b;
    a.species = {SpeciesState::make_grid(gaussian_field(g, {1.2}, {0.04}))};
    b.species = {SpeciesState::make_grid(gaussian_field(g, {0.3}, {0.04}))};
    SimOptions opts;
    opts.T = 2.0;
    opts.record_every = 20;
    opts.w2_coarsen = 512;
    spec.prepare(a);
    PairTrajectory pair = simulate_pair(spec, a, b, opts);

    RateFit fit = fit_rate(pair.times, pair.w2, 0.2, 1.8);
    CHECK(fit.rate > 0.9 * lambda);
    CHECK(fit.rate < 1.1 * lambda);
    CHECK(fit.r_squared > 0.99);
}

TEST_CASE("lyapunov D decays along a monotone flow") {
    auto g = build_grid({1, {-4.0}, {4.0}, {64}});
    std::vector<TermPtr> terms;
    terms.push_back(make_potential(0, RadialProfile::named("quadratic", {})));
    terms.push_back(make_diffusion(0, 1.0, 0.5));
    EnergySpec spec = spec_with(g, std::move(terms));
    SystemState init;
    init.species = {SpeciesState::make_grid(gaussian_field(g, {1.0}, {0.2}))};
    SimOptions opts;
    opts.T = 1.5;
    opts.record_every = 100;
    spec.prepare(init);
    Trajectory traj = simulate(spec, init, opts);
    auto D = traj.series_D();
    for (std::size_t k = 1; k < D.size(); ++k) CHECK(D[k] <= D[k - 1] + 1e-10);
}

TEST_CASE("dirac species follow their ODE under explicit Euler") {
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dirac = true;
    sp.dim = 2;
    spec.species.push_back(std::move(sp));
    spec.species[0].terms.push_back(
        make_potential(0, RadialProfile::named("quadratic", {}), 2.0));  // v = -2h
    SystemState cur;
    cur.species = {SpeciesState::make_dirac({1.0, -0.5})};
    while (cur.t < 1.0 - 1e-12) {
        Velocities vel = spec.assemble_velocity(cur);
        double dt = std::min(1e-3, 1.0 - cur.t);
        cur = fv_step(cur, vel, dt);
    }
    CHECK(cur.species[0].point[0] == doctest::Approx(std::exp(-2.0)).epsilon(2e-3));
    CHECK(cur.species[0].point[1] == doctest::Approx(-0.5 * std::exp(-2.0)).epsilon(2e-3));
}

TEST_CASE("cfl violation is detected") {
    auto g = build_grid({1, {0.0}, {1.0}, {16}});
    DensityField f{g, std::vector<double>(16, 1.0)};
    SystemState st;
    st.species = {SpeciesState::make_grid(f)};
    Velocities vel = constant_velocity(st, 0.0);
    // interface velocities around cell 8 drain it from both sides
    vel.v[0].field.comp[0][7] = -8.0;
    vel.v[0].field.comp[0][9] = 8.0;
    CHECK_THROWS_AS(fv_step(st, vel, 0.5), RuntimeError);
}

TEST_CASE("term-free systems are fixed points of the assemble-step loop") {
    auto g = build_grid({1, {-1.0}, {1.0}, {24}});
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = 1;
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.1}, {0.05}))};
    std::vector<double> before = st.species[0].field.values;
    for (int k = 0; k < 5; ++k) {
        Velocities vel = spec.assemble_velocity(st);
        double dt = cfl_dt(st, vel, 0.4, 1e-2);
        st = fv_step(st, vel, dt);
    }
    CHECK(st.species[0].field.values == before);
}
