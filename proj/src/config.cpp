#include "monoflow/config.hpp"

#include <cmath>
#include <fstream>

namespace monoflow {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw ConfigError("config: " + where + ": " + what);
}

template <class T>
T get_or(const json& j, const std::string& key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(key, e.what());
    }
}

template <class T>
T require(const json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) fail(where, "missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(where + "." + key, e.what());
    }
}

std::vector<double> vec_of(const json& j, const std::string& where) {
    if (!j.is_array()) fail(where, "expected an array of numbers");
    std::vector<double> v;
    for (const auto& e : j) {
        if (!e.is_number()) fail(where, "expected numbers");
        v.push_back(e.get<double>());
    }
    return v;
}

SmallMat mat_of(const json& j, const std::string& where) {
    if (!j.is_array() || j.empty()) fail(where, "expected a matrix (array of rows)");
    SmallMat M;
    M.rows = static_cast<int>(j.size());
    M.cols = static_cast<int>(j.at(0).size());
    for (const auto& row : j) {
        if (static_cast<int>(row.size()) != M.cols) fail(where, "ragged matrix");
        for (const auto& e : row) M.a.push_back(e.get<double>());
    }
    return M;
}

GridPtr parse_grid(const json& j, const std::string& where) {
    GridSpec gs;
    gs.dim = require<int>(j, "dim", where);
    gs.lower = vec_of(require<json>(j, "lower", where), where + ".lower");
    gs.upper = vec_of(require<json>(j, "upper", where), where + ".upper");
    for (const auto& c : require<json>(j, "cells", where)) gs.cells.push_back(c.get<int>());
    return build_grid(std::move(gs));
}

LoglossMode parse_mode(const std::string& s, const std::string& where) {
    if (s == "prob") return LoglossMode::Prob;
    if (s == "log_prob") return LoglossMode::LogProb;
    if (s == "log_one_minus") return LoglossMode::LogOneMinus;
    fail(where, "unknown logloss mode '" + s + "'");
}

std::shared_ptr<const Kernel2> parse_kernel(const json& j, const std::string& where) {
    std::string name = require<std::string>(j, "kernel", where);
    if (name == "quad_cross") {
        double c = require<double>(j, "c", where);
        return std::make_shared<QuadCrossKernel>(c, mat_of(require<json>(j, "B", where),
                                                           where + ".B"));
    }
    if (name == "logloss") {
        auto mode = parse_mode(get_or<std::string>(j, "mode", "prob"), where);
        double steep = get_or<double>(j, "steepness", 1.0);
        return std::make_shared<LoglossKernel>(mode, steep);
    }
    auto params = j.contains("params") ? vec_of(j.at("params"), where + ".params")
                                       : std::vector<double>{};
    return std::make_shared<RadialKernel2>(RadialProfile::named(name, params));
}

TermPtr parse_term(const json& j, int owner, const EnergySpec& spec,
                   const std::vector<GridPtr>& grids, const std::string& where) {
    std::string type = require<std::string>(j, "type", where);
    int subject = get_or<int>(j, "subject", owner);
    double weight = get_or<double>(j, "weight", 1.0);

    if (type == "potential") {
        auto prof = RadialProfile::named(
            require<std::string>(j, "profile", where),
            j.contains("params") ? vec_of(j.at("params"), where + ".params")
                                 : std::vector<double>{});
        return make_potential(subject, prof, weight);
    }
    if (type == "cross_interaction") {
        int other = require<int>(j, "other", where);
        return make_cross_interaction(subject, other, parse_kernel(j, where), weight);
    }
    if (type == "self_interaction") {
        auto prof = RadialProfile::named(
            require<std::string>(j, "profile", where),
            j.contains("params") ? vec_of(j.at("params"), where + ".params")
                                 : std::vector<double>{});
        return make_self_interaction(subject, prof, weight);
    }
    if (type == "diffusion") {
        return make_diffusion(subject, require<double>(j, "m", where),
                              require<double>(j, "alpha", where), weight);
    }
    if (type == "kl") {
        if (subject < 0 || subject >= static_cast<int>(grids.size()) || !grids[subject])
            fail(where, "kl term needs a grid species subject");
        DensityField ref =
            build_initial_density(grids[subject], require<json>(j, "reference", where));
        return make_kl(subject, std::move(ref), require<double>(j, "alpha", where), weight);
    }
    if (type == "bilinear") {
        int other = require<int>(j, "other", where);
        int sign = get_or<int>(j, "sign", 1);
        return make_bilinear(subject, other, mat_of(require<json>(j, "matrix", where),
                                                    where + ".matrix"),
                             sign, weight);
    }
    if (type == "quadratic_form") {
        SmallMat Q = mat_of(require<json>(j, "Q", where), where + ".Q");
        std::vector<double> q =
            j.contains("q") ? vec_of(j.at("q"), where + ".q")
                            : std::vector<double>(static_cast<std::size_t>(Q.rows), 0.0);
        std::vector<int> offsets;
        int off = 0;
        for (const auto& sp : spec.species) {
            offsets.push_back(off);
            off += sp.dim;
        }
        if (Q.rows != off || Q.cols != off)
            fail(where, "Q must match the total tuple dimension " + std::to_string(off));
        return make_quadratic_form_cost(subject, std::move(Q), std::move(q),
                                        std::move(offsets), weight);
    }
    if (type == "allocated_utility") return make_allocated_utility(subject, weight);
    if (type == "allocated_loss") return make_allocated_loss(subject, weight);
    fail(where, "unknown term type '" + type + "'");
}

}  // namespace

DensityField build_initial_density(const GridPtr& grid, const json& shape) {
    const Grid& g = *grid;
    std::string type = require<std::string>(shape, "type", "initial");
    DensityField f;
    f.grid = grid;
    f.values.assign(g.size(), 0.0);
    double x[2] = {0.0, 0.0};

    auto add_gaussian = [&](const json& spec, double w) {
        auto mean = vec_of(require<json>(spec, "mean", "initial.gaussian"), "initial.mean");
        auto cov = vec_of(require<json>(spec, "cov", "initial.gaussian"), "initial.cov");
        if (static_cast<int>(mean.size()) != g.dim()) fail("initial", "mean length != dim");
        if (cov.size() == 1 && g.dim() == 2) cov.push_back(cov[0]);
        if (static_cast<int>(cov.size()) != g.dim()) fail("initial", "cov length != dim");
        for (double c : cov)
            if (!(c > 0.0)) fail("initial", "covariance entries must be positive");
        std::vector<double> vals(g.size());
        double m = 0.0;
        for (std::size_t c = 0; c < g.size(); ++c) {
            g.cell_center(c, x);
            double e = 0.0;
            for (int a = 0; a < g.dim(); ++a) e += sq(x[a] - mean[a]) / (2.0 * cov[a]);
            vals[c] = std::exp(-e);
            m += vals[c];
        }
        m *= g.cell_volume();
        if (!(m > 0.0)) fail("initial", "gaussian carries no mass on the grid");
        for (std::size_t c = 0; c < g.size(); ++c) f.values[c] += w * vals[c] / m;
    };
    auto add_uniform = [&](const json& spec, double w) {
        auto lo = vec_of(require<json>(spec, "lower", "initial.uniform"), "initial.lower");
        auto hi = vec_of(require<json>(spec, "upper", "initial.uniform"), "initial.upper");
        std::vector<double> vals(g.size(), 0.0);
        double m = 0.0;
        for (std::size_t c = 0; c < g.size(); ++c) {
            g.cell_center(c, x);
            bool in = true;
            for (int a = 0; a < g.dim(); ++a)
                if (x[a] < lo[a] || x[a] > hi[a]) in = false;
            if (in) {
                vals[c] = 1.0;
                m += 1.0;
            }
        }
        m *= g.cell_volume();
        if (!(m > 0.0)) fail("initial", "uniform box misses every cell");
        for (std::size_t c = 0; c < g.size(); ++c) f.values[c] += w * vals[c] / m;
    };

    if (type == "gaussian") {
        add_gaussian(shape, 1.0);
    } else if (type == "uniform") {
        add_uniform(shape, 1.0);
    } else if (type == "mixture") {
        const auto& comps = require<json>(shape, "components", "initial.mixture");
        double wsum = 0.0;
        for (const auto& comp : comps) wsum += get_or<double>(comp, "weight", 1.0);
        if (!(wsum > 0.0)) fail("initial", "mixture weights must be positive");
        for (const auto& comp : comps) {
            double w = get_or<double>(comp, "weight", 1.0) / wsum;
            std::string ct = require<std::string>(comp, "type", "initial.mixture");
            if (ct == "gaussian")
                add_gaussian(comp, w);
            else if (ct == "uniform")
                add_uniform(comp, w);
            else
                fail("initial.mixture", "unsupported component '" + ct + "'");
        }
    } else {
        fail("initial", "unknown shape '" + type + "' for a grid species");
    }

    // exact unit mass
    double m = f.mass();
    for (double& v : f.values) v /= m;
    return f;
}

namespace {

SystemState build_state(const json& doc, const std::vector<GridPtr>& grids,
                        const std::vector<bool>& dirac, const json* overrides) {
    const auto& species = doc.at("species");
    SystemState st;
    st.species.resize(species.size());
    for (std::size_t i = 0; i < species.size(); ++i) {
        const json* init = nullptr;
        if (overrides && i < overrides->size() && !(*overrides)[i].is_null())
            init = &(*overrides)[i];
        else if (species[i].contains("initial"))
            init = &species[i].at("initial");
        else
            fail("species[" + std::to_string(i) + "]", "missing 'initial'");

        if (dirac[i]) {
            if (require<std::string>(*init, "type", "initial") != "dirac")
                fail("species[" + std::to_string(i) + "]",
                     "Dirac species need an initial of type 'dirac'");
            st.species[i] = SpeciesState::make_dirac(
                vec_of(require<json>(*init, "point", "initial"), "initial.point"));
        } else {
            st.species[i] =
                SpeciesState::make_grid(build_initial_density(grids[i], *init));
        }
    }
    return st;
}

}  // namespace

RunConfig load_config(const json& doc) {
    RunConfig cfg;
    cfg.name = get_or<std::string>(doc, "name", "run");
    cfg.seed = get_or<std::uint64_t>(doc, "seed", 0);

    if (!doc.contains("species") || !doc.at("species").is_array() ||
        doc.at("species").empty())
        fail("species", "at least one species required");
    const auto& species = doc.at("species");

    // pass 1: kinds, grids, dims
    std::vector<GridPtr> grids(species.size());
    std::vector<bool> dirac(species.size(), false);
    for (std::size_t i = 0; i < species.size(); ++i) {
        const std::string where = "species[" + std::to_string(i) + "]";
        std::string kind = get_or<std::string>(species[i], "kind", "grid");
        SpeciesSpec sp;
        if (kind == "grid") {
            grids[i] = parse_grid(require<json>(species[i], "grid", where), where + ".grid");
            sp.dirac = false;
            sp.dim = grids[i]->dim();
            sp.grid = grids[i];
        } else if (kind == "dirac") {
            dirac[i] = true;
            sp.dirac = true;
            sp.dim = get_or<int>(species[i], "dim", 2);
        } else {
            fail(where, "kind must be 'grid' or 'dirac'");
        }
        cfg.spec.species.push_back(std::move(sp));
    }

    // allocation model (before terms so they can reference it)
    if (doc.contains("allocation")) {
        const auto& a = doc.at("allocation");
        AllocationModel model;
        for (const auto& p : require<json>(a, "populations", "allocation"))
            model.populations.push_back(p.get<int>());
        for (const auto& p : require<json>(a, "providers", "allocation"))
            model.providers.push_back(p.get<int>());
        model.eta = require<double>(a, "eta", "allocation");
        model.steepness = get_or<double>(a, "steepness", 1.0);
        model.utility_mode =
            parse_mode(get_or<std::string>(a, "utility", "prob"), "allocation.utility");
        for (const auto& l : require<json>(a, "losses", "allocation"))
            model.loss_modes.push_back(parse_mode(l.get<std::string>(), "allocation.losses"));
        cfg.spec.allocation = std::move(model);
    }

    // pass 2: terms
    for (std::size_t i = 0; i < species.size(); ++i) {
        const std::string where = "species[" + std::to_string(i) + "].terms";
        if (!species[i].contains("terms")) continue;
        int k = 0;
        for (const auto& tj : species[i].at("terms")) {
            cfg.spec.species[i].terms.push_back(
                parse_term(tj, static_cast<int>(i), cfg.spec, grids,
                           where + "[" + std::to_string(k) + "]"));
            ++k;
        }
    }
    cfg.spec.validate();

    cfg.initial = build_state(doc, grids, dirac, nullptr);
    if (doc.contains("compare")) {
        const auto& cj = doc.at("compare");
        const json& inits = require<json>(cj, "initial", "compare");
        if (!inits.is_array() || inits.size() != species.size())
            fail("compare.initial", "one entry per species required (null = reuse)");
        cfg.initial_b = build_state(doc, grids, dirac, &inits);
    }
    if (doc.contains("w2_reference")) {
        const json& refs = doc.at("w2_reference");
        if (!refs.is_array() || refs.size() != species.size())
            fail("w2_reference", "one shape per species required (null = reuse initial)");
        cfg.sim.w2_reference = build_state(doc, grids, dirac, &refs);
    }
    cfg.spec.prepare(cfg.initial);

    // time stepping options
    const json time = get_or<json>(doc, "time", json::object());
    cfg.sim.T = require<double>(time, "T", "time");
    if (!(cfg.sim.T > 0.0)) fail("time.T", "must be positive");
    cfg.sim.dt_cap = get_or<double>(time, "dt_cap", 1e-2);
    cfg.sim.cfl_safety = get_or<double>(time, "cfl_safety", 0.4);
    cfg.sim.record_every = get_or<int>(time, "record_every", 100);
    if (cfg.sim.record_every < 1) fail("time.record_every", "must be >= 1");

    const json out = get_or<json>(doc, "output", json::object());
    cfg.sim.snapshot_count = get_or<int>(out, "snapshots", 0);
    cfg.emit_svg = get_or<bool>(out, "svg", false);
    cfg.sim.record_allocations =
        cfg.spec.allocation.has_value() && get_or<bool>(out, "allocations", true);
    cfg.sim.w2_coarsen = get_or<std::size_t>(out, "w2_coarsen", 1024);

    if (doc.contains("estimate")) {
        const auto& ej = doc.at("estimate");
        EstimateOptions eo;
        std::string fam = get_or<std::string>(ej, "family", "gaussian");
        if (fam == "dirac")
            eo.sampler.family = SamplerFamily::DiracTuples;
        else if (fam == "gaussian")
            eo.sampler.family = SamplerFamily::GridGaussians;
        else if (fam == "mixture")
            eo.sampler.family = SamplerFamily::GridMixtures;
        else
            fail("estimate.family", "expected dirac|gaussian|mixture");
        eo.sampler.dirac_box = get_or<double>(ej, "dirac_box", 1.0);
        eo.sampler.mean_frac = get_or<double>(ej, "mean_frac", 0.4);
        eo.sampler.sigma_lo = get_or<double>(ej, "sigma_lo", 0.05);
        eo.sampler.sigma_hi = get_or<double>(ej, "sigma_hi", 0.12);
        eo.pairs = get_or<int>(ej, "pairs", 100);
        eo.seed = get_or<std::uint64_t>(ej, "seed", cfg.seed);
        eo.coarsen = get_or<std::size_t>(ej, "coarsen", 1024);
        if (ej.contains("claim")) eo.claim = ej.at("claim").get<double>();
        eo.claim_tol = get_or<double>(ej, "claim_tol", 1e-6);
        cfg.estimate = std::move(eo);
    }

    if (doc.contains("fits")) {
        for (const auto& fj : doc.at("fits")) {
            FitRequest fr;
            fr.name = get_or<std::string>(fj, "name", "fit");
            fr.series = require<std::string>(fj, "series", "fits");
            if (fr.series == "w2") {
                if (!cfg.initial_b)
                    fail("fits", "series 'w2' needs a compare block");
            } else if (fr.series != "D" && fr.series != "M") {
                if (fr.series.size() < 2 || fr.series[0] != 'F')
                    fail("fits", "unknown series '" + fr.series + "'");
                int idx = 0;
                try {
                    idx = std::stoi(fr.series.substr(1));
                } catch (const std::exception&) {
                    fail("fits", "unknown series '" + fr.series + "'");
                }
                if (idx < 1 || idx > cfg.spec.n())
                    fail("fits", "series '" + fr.series + "' out of range");
            }
            auto window = vec_of(require<json>(fj, "window", "fits"), "fits.window");
            if (window.size() != 2 || !(window[1] > window[0]))
                fail("fits.window", "expected [t_start, t_end] with t_end > t_start");
            fr.t_start = window[0];
            fr.t_end = window[1];
            fr.envelope = get_or<bool>(fj, "envelope", false);
            fr.normalize = get_or<bool>(fj, "normalize", false);
            cfg.fits.push_back(std::move(fr));
        }
    }

    // resolved config echo
    json resolved = doc;
    resolved["name"] = cfg.name;
    resolved["seed"] = cfg.seed;
    resolved["time"] = {{"T", cfg.sim.T},
                        {"dt_cap", cfg.sim.dt_cap},
                        {"cfl_safety", cfg.sim.cfl_safety},
                        {"record_every", cfg.sim.record_every}};
    resolved["output"] = {{"snapshots", cfg.sim.snapshot_count},
                          {"svg", cfg.emit_svg},
                          {"allocations", cfg.sim.record_allocations},
                          {"w2_coarsen", cfg.sim.w2_coarsen}};
    cfg.resolved = std::move(resolved);
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in '" + path + "': " + e.what());
    }
    return load_config(doc);
}

}  // namespace monoflow
