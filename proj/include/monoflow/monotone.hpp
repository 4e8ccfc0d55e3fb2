#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "monoflow/energy.hpp"
#include "monoflow/state.hpp"
#include "monoflow/transport.hpp"

namespace monoflow {

// ---------------------------------------------------------------------------
// First-order dissipation pairing:
//   pairing = -sum_i int <x - y, v0_i(x) - v1_i(y)> d gamma_i
//   sqdist  =  sum_i int |x - y|^2 d gamma_i
// Monotonicity with parameter lambda means pairing >= lambda * sqdist.
// ---------------------------------------------------------------------------
struct PairingResult {
    double pairing = 0.0;
    double sqdist = 0.0;
};

PairingResult dissipation_pairing(const std::vector<SpeciesVelocity>& v0,
                                  const std::vector<SpeciesVelocity>& v1,
                                  const std::vector<TransportPlan>& plans);

// ---------------------------------------------------------------------------
// Systems whose velocity fields can be evaluated on sampled states.
// ---------------------------------------------------------------------------
class VelocitySystem {
public:
    virtual ~VelocitySystem() = default;
    virtual int n() const = 0;
    virtual int dim(int i) const = 0;
    virtual GridPtr grid(int i) const = 0;  // null for point-only species
    virtual Velocities assemble(const SystemState& st) const = 0;
    virtual bool dirac_admissible() const = 0;  // false when diffusion/KL present
};

class EnergyVelocitySystem final : public VelocitySystem {
public:
    explicit EnergyVelocitySystem(const EnergySpec& spec) : spec_(spec) {}
    int n() const override { return spec_.n(); }
    int dim(int i) const override { return spec_.species[i].dim; }
    GridPtr grid(int i) const override { return spec_.species[i].grid; }
    Velocities assemble(const SystemState& st) const override {
        return spec_.assemble_velocity(st);
    }
    bool dirac_admissible() const override { return !spec_.has_diffusion_like_terms(); }

private:
    const EnergySpec& spec_;
};

// Finite- to infinite-dimensional lift: given u = [u_1,...,u_n] on the
// concatenated tuple, v_i[rho](x_i) = -int u_i(x) d rho_{-i}(x_{-i}).
class LiftedVelocitySystem final : public VelocitySystem {
public:
    // u(x_full, out_full) writes all n blocks
    using TupleField = std::function<void(const double*, double*)>;

    LiftedVelocitySystem(std::vector<int> dims, TupleField u,
                         std::vector<GridPtr> grids = {});
    int n() const override { return static_cast<int>(dims_.size()); }
    int dim(int i) const override { return dims_[i]; }
    GridPtr grid(int i) const override {
        return grids_.empty() ? nullptr : grids_[i];
    }
    Velocities assemble(const SystemState& st) const override;
    bool dirac_admissible() const override { return true; }

    // direct evaluation of the lifted velocity for species i at x_i
    void lifted_velocity(const SystemState& st, int i, const double* xi, double* out) const;

private:
    std::vector<int> dims_;
    std::vector<int> offsets_;
    int total_dim_ = 0;
    TupleField u_;
    std::vector<GridPtr> grids_;
};

// ---------------------------------------------------------------------------
// Empirical lambda estimation over sampled measure pairs.
// ---------------------------------------------------------------------------
enum class SamplerFamily { DiracTuples, GridGaussians, GridMixtures };

struct SamplerOptions {
    SamplerFamily family = SamplerFamily::GridGaussians;
    // Dirac tuples: component range [-dirac_box, dirac_box]
    double dirac_box = 1.0;
    // grid samplers: means inside mean_frac * half-width around the center,
    // per-axis sigma in [sigma_lo, sigma_hi] * half-width
    double mean_frac = 0.4;
    double sigma_lo = 0.05;
    double sigma_hi = 0.12;
};

struct PairRecord {
    std::uint64_t seed = 0;
    double dissipation = 0.0;
    double sqdist = 0.0;
    double ratio = 0.0;
};

struct MonotonicityReport {
    double lambda_hat = 0.0;
    int num_pairs = 0;
    int skipped = 0;  // degenerate pairs (zero distance)
    PairRecord worst;
    std::string worst_description;
    std::vector<PairRecord> pairs;
    bool single_plan_caveat = false;
    std::optional<double> claim;
    bool violation = false;
};

MonotonicityReport estimate_lambda(const VelocitySystem& sys, const SamplerOptions& sampler,
                                   int K, std::uint64_t seed,
                                   std::size_t coarsen_to = 1024,
                                   std::optional<double> claim = std::nullopt,
                                   double claim_tol = 1e-6);

// sample one system state from the family (exposed for tests)
SystemState sample_state(const VelocitySystem& sys, const SamplerOptions& so, Rng& rng);

// ---------------------------------------------------------------------------
// Lambda matrix criterion for cross-interaction kernels.
// ---------------------------------------------------------------------------
struct LambdaMatrix {
    std::vector<double> c;                    // diagonal convexity bounds
    std::vector<std::vector<double>> alpha;   // nonnegative, zero diagonal

    void validate() const;
};

double lambda_matrix_bound(const LambdaMatrix& lm);

// ---------------------------------------------------------------------------
// Radial kernel Hessian lower bounds (closed-form eigenvalue expressions
// evaluated on a radius grid plus the analytic tail limit).
// ---------------------------------------------------------------------------
double kernel_hessian_bound(const RadialProfile& prof, double radius_max = 10.0,
                            long long samples = 1000001);

// ---------------------------------------------------------------------------
// Second-order quadratic form:
//   lhs  = sum_ij iint <w_i, Hess2_ij w_j> drho_i drho_j
//        + sum_i  int  <w_i, Hess1_ii w_i> drho_i
//   norm = sum_i int |w_i|^2 drho_i
// Diffusion/KL terms are rejected.
// ---------------------------------------------------------------------------
struct SecondOrderForm {
    double lhs = 0.0;
    double norm = 0.0;
};

SecondOrderForm second_order_form(const EnergySpec& spec, const SystemState& st,
                                  const std::vector<SpeciesVelocity>& w);

}  // namespace monoflow
