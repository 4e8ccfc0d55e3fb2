// monoflow: simulate coupled multispecies flows in Wasserstein space and
// certify lambda-monotonicity numerically.
//
//   monoflow simulate <config.json> [--out DIR] [--jobs N]
//   monoflow estimate-lambda <config.json> [--pairs K] [--seed S] [--out DIR]
//   monoflow tools w2|lambda-matrix|kernel-bound ...
//
// Exit codes: 0 ok, 2 config error, 3 runtime error.

#include <cstdio>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "monoflow/config.hpp"
#include "monoflow/io.hpp"
#include "monoflow/monotone.hpp"
#include "monoflow/runner.hpp"

using nlohmann::json;
using namespace monoflow;

namespace {

DiscreteMeasure measure_from_json(const std::string& pts_text, const std::string& w_text,
                                  const std::string& what) {
    json pts = json::parse(pts_text);
    if (!pts.is_array() || pts.empty())
        throw ConfigError(what + ": expected a JSON array of points");
    DiscreteMeasure m;
    // scalars are treated as 1-d points
    if (pts.front().is_number()) {
        m.dim = 1;
        for (const auto& p : pts) m.points.push_back(p.get<double>());
    } else {
        m.dim = static_cast<int>(pts.front().size());
        for (const auto& p : pts) {
            if (static_cast<int>(p.size()) != m.dim)
                throw ConfigError(what + ": inconsistent point dimensions");
            for (const auto& c : p) m.points.push_back(c.get<double>());
        }
    }
    const std::size_t n = m.points.size() / m.dim;
    if (w_text.empty()) {
        m.weights.assign(n, 1.0 / static_cast<double>(n));
    } else {
        json w = json::parse(w_text);
        for (const auto& v : w) m.weights.push_back(v.get<double>());
        if (m.weights.size() != n)
            throw ConfigError(what + ": weight count does not match points");
        double s = m.total_mass();
        if (!(s > 0)) throw ConfigError(what + ": weights must have positive mass");
        for (double& v : m.weights) v /= s;
    }
    return m;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"monoflow: n-species monotone flows in Wasserstein space"};
    app.require_subcommand(1);

    // ---- simulate ----
    auto* sim = app.add_subcommand("simulate", "integrate a configured system");
    std::vector<std::string> sim_configs;
    std::string sim_out = "out";
    int jobs = 1;
    bool sim_json = false;
    sim->add_option("config", sim_configs, "config file(s)")->required();
    sim->add_option("--out", sim_out, "output directory root");
    sim->add_option("--jobs", jobs, "parallel runs for batches")->check(CLI::Range(1, 64));
    sim->add_flag("--json", sim_json, "print the summary as JSON");

    // ---- estimate-lambda ----
    auto* est = app.add_subcommand("estimate-lambda", "empirical monotonicity estimate");
    std::string est_config;
    std::string est_out;
    int est_pairs = 0;
    long long est_seed = -1;
    bool est_json = false;
    est->add_option("config", est_config, "config file")->required();
    est->add_option("--pairs", est_pairs, "number of sampled measure pairs");
    est->add_option("--seed", est_seed, "sampler seed");
    est->add_option("--out", est_out, "output directory for report.json");
    est->add_flag("--json", est_json, "print the full report as JSON");

    // ---- tools ----
    auto* tools = app.add_subcommand("tools", "small numeric utilities");
    tools->require_subcommand(1);

    auto* w2c = tools->add_subcommand("w2", "exact W2 distance between point clouds");
    std::string mu_text, nu_text, mu_w, nu_w, plan_out;
    bool w2_json = false;
    w2c->add_option("--mu", mu_text, "source points as JSON, e.g. [[0,0],[1,0]]")
        ->required();
    w2c->add_option("--nu", nu_text, "target points as JSON")->required();
    w2c->add_option("--mu-weights", mu_w, "source weights as JSON (default uniform)");
    w2c->add_option("--nu-weights", nu_w, "target weights as JSON (default uniform)");
    w2c->add_option("--plan-csv", plan_out, "write the optimal plan as CSV triplets");
    w2c->add_flag("--json", w2_json, "machine-readable output");

    auto* lmc = tools->add_subcommand("lambda-matrix",
                                      "min eigenvalue of the cross-interaction matrix");
    std::string c_text, alpha_text;
    bool lm_json = false;
    lmc->add_option("--c", c_text, "diagonal convexity bounds as JSON, e.g. [2,2]")
        ->required();
    lmc->add_option("--alpha", alpha_text,
                    "nonnegative Lipschitz matrix as JSON (zero diagonal)")
        ->required();
    lmc->add_flag("--json", lm_json, "machine-readable output");

    auto* kbc = tools->add_subcommand("kernel-bound", "radial kernel Hessian lower bound");
    std::string kern_name;
    std::vector<double> kern_params;
    double rmax = 10.0;
    long long samples = 1000001;
    bool kb_json = false;
    kbc->add_option("name", kern_name, "power | power_law | morse | quadratic | quartic")
        ->required();
    kbc->add_option("params", kern_params, "kernel parameters");
    kbc->add_option("--rmax", rmax, "radius grid extent");
    kbc->add_option("--samples", samples, "radius grid points");
    kbc->add_flag("--json", kb_json, "machine-readable output");

    CLI11_PARSE(app, argc, argv);

    if (sim->parsed()) {
        std::vector<std::pair<std::string, RunConfig>> runs;
        for (const auto& path : sim_configs) runs.emplace_back(path, load_config_file(path));
        std::vector<std::future<json>> futs;
        std::vector<json> results(runs.size());
        std::size_t next = 0;
        while (next < runs.size()) {
            std::size_t batch = std::min<std::size_t>(jobs, runs.size() - next);
            futs.clear();
            for (std::size_t k = 0; k < batch; ++k) {
                const auto& [path, cfg] = runs[next + k];
                std::string outdir =
                    runs.size() == 1 ? sim_out : sim_out + "/" + cfg.name;
                futs.push_back(std::async(std::launch::async, [&cfg, outdir] {
                    return run_simulate(cfg, outdir);
                }));
            }
            for (std::size_t k = 0; k < batch; ++k) results[next + k] = futs[k].get();
            next += batch;
        }
        for (std::size_t k = 0; k < runs.size(); ++k) {
            if (sim_json) {
                std::cout << results[k].dump(2) << "\n";
            } else {
                long long steps =
                    results[k].contains("trajectory")
                        ? results[k]["trajectory"]["steps"].get<long long>()
                        : results[k]["trajectory_a"]["steps"].get<long long>();
                std::cout << runs[k].second.name << ": done in "
                          << results[k]["runtime_seconds"].get<double>()
                          << " s, steps=" << steps << "\n";
            }
        }
        return 0;
    }

    if (est->parsed()) {
        RunConfig cfg = load_config_file(est_config);
        json rep = run_estimate(cfg, est_pairs, est_seed, est_out);
        if (est_json) {
            std::cout << rep.dump(2) << "\n";
        } else {
            std::printf("lambda_hat = %.12g over %d pairs\n",
                        rep["lambda_hat"].get<double>(), rep["num_pairs"].get<int>());
            if (rep.contains("violation") && rep["violation"].get<bool>())
                std::printf("violation: claimed lambda %.12g not met\n",
                            rep["claim"].get<double>());
        }
        return 0;
    }

    if (w2c->parsed()) {
        DiscreteMeasure mu = measure_from_json(mu_text, mu_w, "mu");
        DiscreteMeasure nu = measure_from_json(nu_text, nu_w, "nu");
        W2Result res = w2_exact(mu, nu);
        if (!plan_out.empty()) write_plan_csv(plan_out, res.plan);
        if (w2_json) {
            json out = {{"distance", res.distance},
                        {"squared_distance", res.distance * res.distance},
                        {"plan_entries", res.plan.entries.size()}};
            std::cout << out.dump(2) << "\n";
        } else {
            std::printf("%.12g\n", res.distance);
        }
        return 0;
    }

    if (lmc->parsed()) {
        LambdaMatrix lm;
        for (const auto& v : json::parse(c_text)) lm.c.push_back(v.get<double>());
        for (const auto& row : json::parse(alpha_text)) {
            lm.alpha.emplace_back();
            for (const auto& v : row) lm.alpha.back().push_back(v.get<double>());
        }
        double bound = lambda_matrix_bound(lm);
        if (lm_json)
            std::cout << json{{"lambda", bound}}.dump(2) << "\n";
        else
            std::printf("%.12g\n", bound);
        return 0;
    }

    if (kbc->parsed()) {
        RadialProfile prof = RadialProfile::named(kern_name, kern_params);
        double bound = kernel_hessian_bound(prof, rmax, samples);
        if (kb_json)
            std::cout << json{{"lambda_tilde", bound}}.dump(2) << "\n";
        else
            std::printf("%.12g\n", bound);
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 3;
    }
}
