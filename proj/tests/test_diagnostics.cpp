#include <doctest.h>

#include <cmath>

#include "monoflow/diagnostics.hpp"
#include "monoflow/dynamics.hpp"
#include "monoflow/transport.hpp"
#include "test_support.hpp"

using namespace monoflow;
using testsup::gaussian_field;

TEST_CASE("lyapunov D basics") {
    // no terms: velocities vanish identically
    auto g = build_grid({1, {-1.0}, {1.0}, {32}});
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = 1;
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0}, {0.05}))};
    CHECK(lyapunov_D(spec, st) == doctest::Approx(0.0));

    // single Dirac under V = |x|^2/2: D = |a|^2 / 2
    EnergySpec dspec;
    SpeciesSpec dp;
    dp.dirac = true;
    dp.dim = 2;
    dspec.species.push_back(std::move(dp));
    dspec.species[0].terms.push_back(
        make_potential(0, RadialProfile::named("quadratic", {})));
    SystemState ds;
    ds.species = {SpeciesState::make_dirac({0.6, -0.8})};
    CHECK(lyapunov_D(dspec, ds) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("second moment values") {
    SystemState origin;
    origin.species = {SpeciesState::make_dirac({0.0, 0.0}),
                      SpeciesState::make_dirac({0.0})};
    CHECK(second_moment(origin) == doctest::Approx(0.0));

    auto g = build_grid({2, {-5.0, -5.0}, {5.0, 5.0}, {100, 100}});
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0, 0.0}, {1.0, 1.0}))};
    CHECK(std::abs(second_moment(st) - 1.0) < 1e-3);  // d/2 for the standard Gaussian
}

TEST_CASE("second moment equals half the squared distance to the origin Dirac") {
    auto g = build_grid({1, {-3.0}, {3.0}, {96}});
    SystemState st, origin;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.7}, {0.1}))};
    origin.species = {SpeciesState::make_dirac({0.0})};
    double M = second_moment(st);
    double d = joint_w2(st, origin);
    CHECK(M == doctest::Approx(0.5 * d * d).epsilon(1e-6));
}

TEST_CASE("nash residual vanishes at Gibbs and not far from it") {
    auto g = build_grid({1, {-4.0}, {4.0}, {128}});
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = 1;
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    spec.species[0].terms.push_back(make_potential(0, RadialProfile::named("quadratic", {})));
    spec.species[0].terms.push_back(make_diffusion(0, 1.0, 1.0));

    DensityField gibbs{g, std::vector<double>(g->size())};
    for (std::size_t c = 0; c < g->size(); ++c)
        gibbs.values[c] = std::exp(-0.5 * sq(g->axis_centers(0)[c]));
    double m = gibbs.mass();
    for (double& v : gibbs.values) v /= m;
    SystemState at_gibbs;
    at_gibbs.species = {SpeciesState::make_grid(gibbs)};
    double h = g->spacing(0);
    CHECK(nash_residual(spec, at_gibbs) < 10.0 * h * h);

    SystemState far;
    far.species = {SpeciesState::make_grid(gaussian_field(g, {1.5}, {0.1}))};
    CHECK(nash_residual(spec, far) > 0.5);
}

TEST_CASE("rate fitting on clean exponentials") {
    std::vector<double> t, y1, y2;
    for (int k = 0; k < 50; ++k) {
        double tk = 0.1 * k;
        t.push_back(tk);
        y1.push_back(std::exp(-2.0 * tk));
        y2.push_back(5.0 * std::exp(-0.31 * tk));
    }
    RateFit f1 = fit_rate(t, y1, 0.0, 5.0);
    CHECK(std::abs(f1.rate - 2.0) < 1e-9);
    CHECK(f1.r_squared == doctest::Approx(1.0).epsilon(1e-12));
    RateFit f2 = fit_rate(t, y2, 0.0, 5.0);
    CHECK(std::abs(f2.rate - 0.31) < 1e-9);
    CHECK(std::exp(f2.intercept) == doctest::Approx(5.0).epsilon(1e-9));
}

TEST_CASE("envelope fitting recovers the rate of an oscillatory decay") {
    std::vector<double> t, y;
    for (int k = 0; k < 4000; ++k) {
        double tk = 0.005 * k;
        t.push_back(tk);
        y.push_back(std::exp(-0.3 * tk) * std::abs(std::cos(10.0 * tk)) + 1e-6);
    }
    RateFit fit = fit_rate(t, y, 0.5, 19.0, /*envelope=*/true);
    CHECK(fit.rate == doctest::Approx(0.3).epsilon(0.10));
}

TEST_CASE("rate fitting input validation") {
    std::vector<double> t = {0.0, 1.0, 2.0};
    std::vector<double> bad = {1.0, -1.0, 0.5};
    CHECK_THROWS_AS(fit_rate(t, bad, 0.0, 2.0), ConfigError);
    std::vector<double> two_t = {0.0, 1.0};
    std::vector<double> two_y = {1.0, 0.5};
    CHECK_THROWS_AS(fit_rate(two_t, two_y, 0.0, 1.0), ConfigError);
    CHECK_THROWS_AS(fit_rate(t, two_y, 0.0, 1.0), ConfigError);
}

TEST_CASE("second moments stay inside the Dirac-velocity ball") {
    // shifted well V = lambda |x - x0|^2/2 split as lambda |x|^2/2 - lambda x0 x:
    // the affine part is 0-monotone, so the system is lambda-monotone with
    // c = 2 |v[delta_0](0)| = 2 lambda |x0| and
    // sup_t M <= max(c / (4 lambda), M(0)) up to grid tolerance
    const double lambda = 1.0, x0 = 0.6;
    auto g = build_grid({1, {-2.5}, {2.5}, {96}});
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = 1;
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    spec.species[0].terms.push_back(
        make_potential(0, RadialProfile::named("quadratic", {}), lambda));
    spec.species[0].terms.push_back(
        make_quadratic_form_cost(0, SmallMat::zero(1, 1), {-lambda * x0}, {0}));

    SystemState dirac_origin;
    dirac_origin.species = {SpeciesState::make_dirac({0.0})};
    Velocities v0 = spec.assemble_velocity(dirac_origin);
    double c = 2.0 * std::sqrt(sqnorm(v0.v[0].vec.data(), 1));
    CHECK(c == doctest::Approx(2.0 * lambda * x0).epsilon(1e-12));

    SystemState init;
    init.species = {SpeciesState::make_grid(gaussian_field(g, {0.0}, {0.02}))};
    SimOptions opts;
    opts.T = 4.0;
    opts.record_every = 25;
    Trajectory traj = simulate(spec, init, opts);
    double bound = std::max(c / (4.0 * lambda), traj.samples.front().M);
    for (const auto& s : traj.samples) CHECK(s.M <= bound + 2e-2);
}

TEST_CASE("mollifier constant matches the analytic value for a quadratic well") {
    // v = -x under V = |x|^2/2: c_tau = (int |x|^2 rho^tau)^(1/2) = sqrt(d tau)
    auto g = build_grid({1, {-4.0}, {4.0}, {256}});
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = 1;
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    spec.species[0].terms.push_back(make_potential(0, RadialProfile::named("quadratic", {})));
    const double tau = 0.25;
    double c = mollifier_constant(spec, tau);
    CHECK(c == doctest::Approx(std::sqrt(tau)).epsilon(5e-3));
    CHECK_THROWS_AS(mollifier_constant(spec, -1.0), ConfigError);
}
