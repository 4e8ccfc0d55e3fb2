#include <doctest.h>

#include <cmath>

#include "monoflow/energy.hpp"
#include "test_support.hpp"

using namespace monoflow;
using testsup::gaussian_field;

namespace {

RadialProfile quad() { return RadialProfile::named("quadratic", {}); }

EnergySpec one_species_spec(const GridPtr& g) {
    EnergySpec spec;
    SpeciesSpec sp;
    sp.dim = g->dim();
    sp.grid = g;
    spec.species.push_back(std::move(sp));
    return spec;
}

}  // namespace

TEST_CASE("potential first variation is the potential itself") {
    auto g = build_grid({1, {-2.0}, {2.0}, {32}});
    EnergySpec spec = one_species_spec(g);
    spec.species[0].terms.push_back(make_potential(0, quad()));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.3}, {0.2}))};
    auto fv = spec.first_variation(st, 0);
    for (std::size_t c = 0; c < g->size(); ++c) {
        double x = g->axis_centers(0)[c];
        CHECK(fv[c] == doctest::Approx(0.5 * x * x).epsilon(1e-13));
    }
}

TEST_CASE("bilinear coupling against a Dirac gives x . b") {
    auto g = build_grid({2, {-2.0, -2.0}, {2.0, 2.0}, {16, 16}});
    EnergySpec spec = one_species_spec(g);
    SpeciesSpec dir;
    dir.dirac = true;
    dir.dim = 2;
    spec.species.push_back(std::move(dir));
    SmallMat A = SmallMat::zero(2, 2);
    A.at(0, 0) = A.at(1, 1) = 1.0;
    spec.species[0].terms.push_back(make_bilinear(0, 1, A, +1));

    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0, 0.0}, {0.2, 0.2})),
                  SpeciesState::make_dirac({0.7, -0.4})};
    auto fv = spec.first_variation(st, 0);
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g->size(); ++c) {
        g->cell_center(c, x);
        CHECK(fv[c] == doctest::Approx(0.7 * x[0] - 0.4 * x[1]).epsilon(1e-12));
    }
}

TEST_CASE("quadratic diffusion first variation on a flat density") {
    auto g = build_grid({1, {0.0}, {1.0}, {64}});
    EnergySpec spec = one_species_spec(g);
    spec.species[0].terms.push_back(make_diffusion(0, 2.0, 1.0));
    SystemState st;
    st.species = {SpeciesState::make_grid({g, std::vector<double>(g->size(), 1.0)})};
    auto fv = spec.first_variation(st, 0);
    for (double v : fv) CHECK(v == doctest::Approx(2.0).epsilon(1e-14));  // m rho^(m-1)/(m-1)
}

TEST_CASE("assemble velocity for a quadratic well points inward") {
    auto g = build_grid({1, {-2.0}, {2.0}, {128}});
    EnergySpec spec = one_species_spec(g);
    spec.species[0].terms.push_back(make_potential(0, quad()));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0}, {0.3}))};
    Velocities vel = spec.assemble_velocity(st);
    for (std::size_t c = 1; c + 1 < g->size(); ++c) {
        double x = g->axis_centers(0)[c];
        CHECK(vel.v[0].field.comp[0][c] == doctest::Approx(-x).epsilon(1e-10));
    }
}

TEST_CASE("entropy velocity of a sampled Gaussian is x/sigma^2 in the bulk") {
    auto g = build_grid({1, {-3.0}, {3.0}, {128}});
    const double s2 = 0.25;
    EnergySpec spec = one_species_spec(g);
    spec.species[0].terms.push_back(make_diffusion(0, 1.0, 1.0));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0}, {s2}))};
    Velocities vel = spec.assemble_velocity(st);
    const double h = g->spacing(0);
    for (std::size_t c = 0; c < g->size(); ++c) {
        double x = g->axis_centers(0)[c];
        if (std::abs(x) > 1.2) continue;  // stay in the bulk
        CHECK(std::abs(vel.v[0].field.comp[0][c] - x / s2) < 20.0 * h * h);
    }
}

TEST_CASE("zero-sum bilinear pair produces the rotation field") {
    auto g = build_grid({1, {-3.0}, {3.0}, {96}});
    EnergySpec spec;
    for (int i = 0; i < 2; ++i) {
        SpeciesSpec sp;
        sp.dim = 1;
        sp.grid = g;
        spec.species.push_back(std::move(sp));
    }
    const double lambda = 1.0, a = 0.8;
    SmallMat A{1, 1, {a}};
    spec.species[0].terms.push_back(make_potential(0, quad(), lambda));
    spec.species[0].terms.push_back(make_bilinear(0, 1, A, +1));
    spec.species[1].terms.push_back(make_potential(1, quad(), lambda));
    spec.species[1].terms.push_back(make_bilinear(1, 0, A, -1));  // A2 = -A1

    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.8}, {0.05})),
                  SpeciesState::make_grid(gaussian_field(g, {-0.5}, {0.05}))};
    EvalContext ctx(spec, st);
    double m1 = ctx.mean(0)[0], m2 = ctx.mean(1)[0];
    Velocities vel = spec.assemble_velocity(st);
    for (std::size_t c = 4; c + 4 < g->size(); ++c) {
        double x = g->axis_centers(0)[c];
        CHECK(vel.v[0].field.comp[0][c] ==
              doctest::Approx(-lambda * x - a * m2).epsilon(1e-8));
        CHECK(vel.v[1].field.comp[0][c] ==
              doctest::Approx(-lambda * x + a * m1).epsilon(1e-8));
    }
}

TEST_CASE("energy values: Gaussian second moment and uniform entropy") {
    auto g2 = build_grid({2, {-4.0, -4.0}, {4.0, 4.0}, {96, 96}});
    EnergySpec spec = one_species_spec(g2);
    spec.species[0].terms.push_back(make_potential(0, quad()));
    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g2, {0.0, 0.0}, {1.0, 1.0}))};
    CHECK(spec.energy_value(st, 0) == doctest::Approx(1.0).epsilon(2e-3));  // d/2

    auto g1 = build_grid({1, {0.0}, {1.0}, {64}});
    EnergySpec spec_h = one_species_spec(g1);
    spec_h.species[0].terms.push_back(make_diffusion(0, 1.0, 1.0));
    SystemState su;
    su.species = {SpeciesState::make_grid({g1, std::vector<double>(g1->size(), 1.0)})};
    CHECK(spec_h.energy_value(su, 0) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("energy value is additive across terms") {
    auto g = build_grid({1, {-2.0}, {2.0}, {48}});
    EnergySpec both = one_species_spec(g);
    both.species[0].terms.push_back(make_potential(0, quad(), 0.7));
    both.species[0].terms.push_back(make_diffusion(0, 2.0, 1.3));
    EnergySpec only_v = one_species_spec(g);
    only_v.species[0].terms.push_back(make_potential(0, quad(), 0.7));
    EnergySpec only_d = one_species_spec(g);
    only_d.species[0].terms.push_back(make_diffusion(0, 2.0, 1.3));

    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g, {0.4}, {0.1}))};
    CHECK(both.energy_value(st, 0) ==
          doctest::Approx(only_v.energy_value(st, 0) + only_d.energy_value(st, 0))
              .epsilon(1e-14));
}

TEST_CASE("softmax allocation rows") {
    // eta = 0: uniform regardless of utilities
    auto a0 = allocation_softmax({{3.0, -1.0, 0.5}}, 0.0);
    for (double v : a0[0]) CHECK(v == doctest::Approx(1.0 / 3.0));

    // scalar check: utilities 1 and 0 at eta = 0.5
    auto a = allocation_softmax({{1.0, 0.0}}, 0.5);
    CHECK(a[0][0] == doctest::Approx(0.6225).epsilon(1e-3));
    CHECK(a[0][1] == doctest::Approx(0.3775).epsilon(1e-3));
    CHECK(a[0][0] + a[0][1] == doctest::Approx(1.0).epsilon(1e-12));

    // equal utilities: uniform at any eta
    auto ae = allocation_softmax({{2.5, 2.5}}, 7.0);
    CHECK(ae[0][0] == doctest::Approx(0.5).epsilon(1e-12));

    // shifting a row by a constant changes nothing
    auto s1 = allocation_softmax({{0.2, 1.4, -0.3}}, 2.0);
    auto s2 = allocation_softmax({{100.2, 101.4, 99.7}}, 2.0);
    for (int j = 0; j < 3; ++j) CHECK(s1[0][j] == doctest::Approx(s2[0][j]).epsilon(1e-12));

    // large utilities do not overflow
    auto big = allocation_softmax({{1e5, 0.0}}, 10.0);
    CHECK(big[0][0] == doctest::Approx(1.0));
}

TEST_CASE("variational consistency for every term family") {
    Rng rng(424242);
    auto g = build_grid({1, {-2.0}, {2.0}, {48}});
    auto g2 = build_grid({2, {-2.0, -2.0}, {2.0, 2.0}, {20, 20}});

    auto run_check = [&](EnergySpec& spec, SystemState& st, int i) {
        double worst = 0.0;
        for (int rep = 0; rep < 5; ++rep)
            worst = std::max(worst, testsup::variational_error(spec, st, i, rng));
        return worst;
    };

    SUBCASE("potential") {
        EnergySpec spec = one_species_spec(g);
        spec.species[0].terms.push_back(
            make_potential(0, RadialProfile::named("quartic", {}), 0.9));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g, {0.2}, {0.15}))};
        CHECK(run_check(spec, st, 0) < 1e-5);
    }
    SUBCASE("self interaction") {
        EnergySpec spec = one_species_spec(g);
        spec.species[0].terms.push_back(
            make_self_interaction(0, RadialProfile::named("morse", {2.0, 0.5, 1.0, 1.0})));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g, {0.0}, {0.2}))};
        CHECK(run_check(spec, st, 0) < 1e-5);
    }
    SUBCASE("cross interaction both sides") {
        EnergySpec spec;
        for (int i = 0; i < 2; ++i) {
            SpeciesSpec sp;
            sp.dim = 1;
            sp.grid = g;
            spec.species.push_back(std::move(sp));
        }
        SmallMat B{1, 1, {0.6}};
        spec.species[0].terms.push_back(
            make_cross_interaction(0, 1, std::make_shared<QuadCrossKernel>(1.5, B)));
        spec.species[1].terms.push_back(make_cross_interaction(
            1, 0,
            std::make_shared<RadialKernel2>(
                RadialProfile::named("morse", {1.0, 0.7, 0.4, 1.3}))));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g, {0.5}, {0.1})),
                      SpeciesState::make_grid(gaussian_field(g, {-0.4}, {0.12}))};
        CHECK(run_check(spec, st, 0) < 1e-5);
        CHECK(run_check(spec, st, 1) < 1e-5);
    }
    SUBCASE("diffusion m=1 and m=2") {
        for (double m : {1.0, 2.0}) {
            EnergySpec spec = one_species_spec(g);
            spec.species[0].terms.push_back(make_diffusion(0, m, 0.7));
            SystemState st;
            st.species = {SpeciesState::make_grid(gaussian_field(g, {0.1}, {0.3}))};
            CHECK(run_check(spec, st, 0) < 1e-4);
        }
    }
    SUBCASE("kl") {
        EnergySpec spec = one_species_spec(g);
        spec.species[0].terms.push_back(make_kl(0, gaussian_field(g, {0.0}, {0.4}), 0.5));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g, {0.3}, {0.2}))};
        CHECK(run_check(spec, st, 0) < 1e-4);
    }
    SUBCASE("bilinear") {
        EnergySpec spec;
        for (int i = 0; i < 2; ++i) {
            SpeciesSpec sp;
            sp.dim = 2;
            sp.grid = g2;
            spec.species.push_back(std::move(sp));
        }
        SmallMat A = SmallMat::zero(2, 2);
        A.at(0, 0) = 1.0;
        A.at(0, 1) = -0.5;
        A.at(1, 0) = 0.25;
        A.at(1, 1) = 2.0;
        spec.species[0].terms.push_back(make_bilinear(0, 1, A, -1, 1.4));
        SystemState st;
        st.species = {
            SpeciesState::make_grid(gaussian_field(g2, {0.4, -0.2}, {0.2, 0.3})),
            SpeciesState::make_grid(gaussian_field(g2, {-0.5, 0.1}, {0.25, 0.15}))};
        CHECK(run_check(spec, st, 0) < 1e-5);
    }
    SUBCASE("finite dimensional quadratic cost") {
        EnergySpec spec;
        for (int i = 0; i < 2; ++i) {
            SpeciesSpec sp;
            sp.dim = 1;
            sp.grid = g;
            spec.species.push_back(std::move(sp));
        }
        SmallMat Q{2, 2, {2.0, 0.7, 0.7, 1.5}};
        spec.species[0].terms.push_back(
            make_quadratic_form_cost(0, Q, {0.3, -0.8}, {0, 1}));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g, {0.6}, {0.1})),
                      SpeciesState::make_grid(gaussian_field(g, {-0.2}, {0.2}))};
        CHECK(run_check(spec, st, 0) < 1e-5);
        CHECK(run_check(spec, st, 1) < 1e-5);
    }
    SUBCASE("allocated utility with frozen weights") {
        EnergySpec spec;
        SpeciesSpec pop;
        pop.dim = 2;
        pop.grid = g2;
        spec.species.push_back(std::move(pop));
        for (int j = 0; j < 2; ++j) {
            SpeciesSpec prov;
            prov.dirac = true;
            prov.dim = 2;
            spec.species.push_back(std::move(prov));
        }
        AllocationModel model;
        model.populations = {0};
        model.providers = {1, 2};
        model.eta = 0.5;
        model.steepness = 2.0;
        model.loss_modes = {LoglossMode::LogProb};
        spec.allocation = model;
        spec.species[0].terms.push_back(make_allocated_utility(0));
        SystemState st;
        st.species = {SpeciesState::make_grid(gaussian_field(g2, {0.5, 0.3}, {0.2, 0.2})),
                      SpeciesState::make_dirac({0.4, 0.1}),
                      SpeciesState::make_dirac({-1.2, -0.1})};
        CHECK(run_check(spec, st, 0) < 1e-5);
    }
}

TEST_CASE("allocated loss h-gradient matches finite differences") {
    auto g2 = build_grid({2, {-2.0, -2.0}, {2.0, 2.0}, {24, 24}});
    EnergySpec spec;
    SpeciesSpec pop;
    pop.dim = 2;
    pop.grid = g2;
    spec.species.push_back(std::move(pop));
    SpeciesSpec prov;
    prov.dirac = true;
    prov.dim = 2;
    spec.species.push_back(std::move(prov));
    AllocationModel model;
    model.populations = {0};
    model.providers = {1};
    model.eta = 0.5;
    model.steepness = 2.0;
    model.loss_modes = {LoglossMode::LogOneMinus};
    spec.allocation = model;
    spec.species[1].terms.push_back(make_allocated_loss(1));
    spec.species[1].terms.push_back(make_potential(1, RadialProfile::named("quadratic", {}), 2.0));

    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g2, {0.4, 0.2}, {0.3, 0.3})),
                  SpeciesState::make_dirac({0.8, -0.2})};
    auto v = spec.dirac_velocity(st, 1);

    // finite differences of F at frozen allocation
    EvalContext base(spec, st);
    auto frozen = base.allocation();
    auto value_at = [&](double d0, double d1) {
        SystemState p = st;
        p.species[1].point[0] += d0;
        p.species[1].point[1] += d1;
        EvalContext ctx(spec, p);
        ctx.preset_allocation(frozen);
        return spec.energy_value_ctx(ctx, 1);
    };
    const double h = 1e-6;
    double g0 = (value_at(h, 0) - value_at(-h, 0)) / (2 * h);
    double g1 = (value_at(0, h) - value_at(0, -h)) / (2 * h);
    CHECK(v[0] == doctest::Approx(-g0).epsilon(1e-6));
    CHECK(v[1] == doctest::Approx(-g1).epsilon(1e-6));
}

TEST_CASE("Gibbs density is a discrete critical point of V + entropy") {
    auto g = build_grid({1, {-4.0}, {4.0}, {128}});
    EnergySpec spec = one_species_spec(g);
    spec.species[0].terms.push_back(make_potential(0, quad()));
    spec.species[0].terms.push_back(make_diffusion(0, 1.0, 1.0));
    DensityField gibbs{g, std::vector<double>(g->size())};
    for (std::size_t c = 0; c < g->size(); ++c)
        gibbs.values[c] = std::exp(-0.5 * sq(g->axis_centers(0)[c]));
    double m = gibbs.mass();
    for (double& v : gibbs.values) v /= m;
    SystemState st;
    st.species = {SpeciesState::make_grid(gibbs)};
    auto fv = spec.first_variation(st, 0);
    VectorField gr = gradient(fv, g);
    double h = g->spacing(0);
    for (std::size_t c = 0; c < g->size(); ++c)
        if (gibbs.values[c] > 1e-4) CHECK(std::abs(gr.comp[0][c]) < 10.0 * h * h);
}

TEST_CASE("validation rejects ill-formed specs") {
    auto g = build_grid({1, {-1.0}, {1.0}, {8}});
    EnergySpec spec = one_species_spec(g);
    SmallMat A{1, 1, {1.0}};
    spec.species[0].terms.push_back(make_bilinear(0, 0, A, 1));
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    EnergySpec spec2;
    SpeciesSpec dir;
    dir.dirac = true;
    dir.dim = 1;
    spec2.species.push_back(std::move(dir));
    spec2.species[0].terms.push_back(make_diffusion(0, 1.0, 1.0));
    CHECK_THROWS_AS(spec2.validate(), ConfigError);

    CHECK_THROWS_AS(make_diffusion(0, 0.5, 1.0), ConfigError);
    CHECK_THROWS_AS(make_diffusion(0, 1.0, -1.0), ConfigError);
}

TEST_CASE("rectangular bilinear coupling between 2d and 1d species") {
    auto g2 = build_grid({2, {-2.0, -2.0}, {2.0, 2.0}, {16, 16}});
    auto g1 = build_grid({1, {-2.0}, {2.0}, {32}});
    EnergySpec spec;
    SpeciesSpec a;
    a.dim = 2;
    a.grid = g2;
    spec.species.push_back(std::move(a));
    SpeciesSpec b;
    b.dim = 1;
    b.grid = g1;
    spec.species.push_back(std::move(b));
    SmallMat A{2, 1, {1.5, -0.5}};   // d_subject x d_other for species 0
    SmallMat At{1, 2, {1.5, -0.5}};  // transposed shape for species 1's view
    spec.species[0].terms.push_back(make_bilinear(0, 1, A, +1));
    spec.species[1].terms.push_back(make_bilinear(1, 0, At, -1, 1.0));
    spec.validate();

    // mis-shaped coupling matrices are rejected
    EnergySpec badspec;
    SpeciesSpec ba;
    ba.dim = 2;
    ba.grid = g2;
    badspec.species.push_back(std::move(ba));
    SpeciesSpec bb;
    bb.dim = 1;
    bb.grid = g1;
    badspec.species.push_back(std::move(bb));
    badspec.species[1].terms.push_back(make_bilinear(1, 0, A, -1));  // wrong shape
    CHECK_THROWS_AS(badspec.validate(), ConfigError);

    SystemState st;
    st.species = {SpeciesState::make_grid(gaussian_field(g2, {0.3, -0.2}, {0.1, 0.1})),
                  SpeciesState::make_grid(gaussian_field(g1, {0.5}, {0.05}))};
    EvalContext ctx(spec, st);
    double m1 = ctx.mean(1)[0];
    auto m0 = ctx.mean(0);

    auto fv0 = spec.first_variation(st, 0);  // x . (A m1)
    double x[2] = {0.0, 0.0};
    g2->cell_center(10, x);
    CHECK(fv0[10] == doctest::Approx((1.5 * x[0] - 0.5 * x[1]) * m1).epsilon(1e-12));

    auto fv1 = spec.first_variation(st, 1);  // -(A^T m0) y
    double y = g1->axis_centers(0)[7];
    CHECK(fv1[7] == doctest::Approx(-(1.5 * m0[0] - 0.5 * m0[1]) * y).epsilon(1e-10));

    // values are equal and opposite
    CHECK(spec.energy_value(st, 0) == doctest::Approx(-spec.energy_value(st, 1)));
}
