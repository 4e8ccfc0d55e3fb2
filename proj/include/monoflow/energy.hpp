#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "monoflow/grid.hpp"
#include "monoflow/state.hpp"

namespace monoflow {

// ---------------------------------------------------------------------------
// Radial profiles shared by potentials and interaction kernels.
// W(z) = w(r) with r = |z|; gradient = phi(r) z; Hessian = phi(r) I + psi(r) z z^T.
// ---------------------------------------------------------------------------
struct RadialProfile {
    enum class Family { Quadratic, Quartic, Power, PowerLaw, Morse };
    Family family = Family::Quadratic;
    double k = 2.0;                      // Power
    double a = 4.0, b = 2.0;             // PowerLaw
    double cr = 1.0, lr = 1.0, ca = 0.0, la = 1.0;  // Morse

    double w(double r) const;
    double phi(double r) const;   // w'(r)/r
    double psi(double r) const;   // (w''(r) - phi(r)) / r^2

    double value(const double* z, int d) const;
    void gradient(const double* z, int d, double* g) const;       // adds nothing, writes
    void hessian(const double* z, int d, double* H) const;        // row-major d*d

    static RadialProfile named(const std::string& name,
                               const std::vector<double>& params);
};

// Small dense matrix for coupling blocks (dims are 1 or 2 here, but kept general).
struct SmallMat {
    int rows = 0, cols = 0;
    std::vector<double> a;  // row-major

    double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
    static SmallMat zero(int r, int c) { return {r, c, std::vector<double>(static_cast<std::size_t>(r) * c, 0.0)}; }
};

// ---------------------------------------------------------------------------
// Bivariate kernels W(x, y) for cross interactions.
// ---------------------------------------------------------------------------
class Kernel2 {
public:
    virtual ~Kernel2() = default;
    virtual double value(const double* x, int dx, const double* y, int dy) const = 0;
    virtual void grad_x(const double* x, int dx, const double* y, int dy, double* g) const;
    virtual void grad_y(const double* x, int dx, const double* y, int dy, double* g) const;
    virtual bool translation_invariant() const { return false; }
    virtual bool hessians_ready() const { return false; }
    virtual void hess_xx(const double* x, int dx, const double* y, int dy, SmallMat& H) const;
    virtual void hess_xy(const double* x, int dx, const double* y, int dy, SmallMat& H) const;
};

// W(x, y) = w(|x - y|) from a radial profile
class RadialKernel2 final : public Kernel2 {
public:
    explicit RadialKernel2(RadialProfile p) : prof_(p) {}
    double value(const double* x, int dx, const double* y, int dy) const override;
    void grad_x(const double* x, int dx, const double* y, int dy, double* g) const override;
    void grad_y(const double* x, int dx, const double* y, int dy, double* g) const override;
    bool translation_invariant() const override { return true; }
    bool hessians_ready() const override { return true; }
    void hess_xx(const double* x, int dx, const double* y, int dy, SmallMat& H) const override;
    void hess_xy(const double* x, int dx, const double* y, int dy, SmallMat& H) const override;
    const RadialProfile& profile() const { return prof_; }

private:
    RadialProfile prof_;
};

// W(x, y) = (c/2)|x|^2 + x^T B y  (convexity c in x, cross-Lipschitz |B|)
class QuadCrossKernel final : public Kernel2 {
public:
    QuadCrossKernel(double c, SmallMat B) : c_(c), B_(std::move(B)) {}
    double value(const double* x, int dx, const double* y, int dy) const override;
    void grad_x(const double* x, int dx, const double* y, int dy, double* g) const override;
    void grad_y(const double* x, int dx, const double* y, int dy, double* g) const override;
    bool hessians_ready() const override { return true; }
    void hess_xx(const double* x, int dx, const double* y, int dy, SmallMat& H) const override;
    void hess_xy(const double* x, int dx, const double* y, int dy, SmallMat& H) const override;

private:
    double c_;
    SmallMat B_;
};

// Logistic classifier family of the multi-learner system. h = (angle, offset):
// theta(h) = [cos h0, sin h0], logit z = c theta^T x - h1, p = sigmoid(z).
enum class LoglossMode { Prob, LogProb, LogOneMinus };

class LoglossKernel final : public Kernel2 {
public:
    LoglossKernel(LoglossMode mode, double steepness) : mode_(mode), c_(steepness) {}
    double value(const double* x, int dx, const double* h, int dh) const override;
    void grad_x(const double* x, int dx, const double* h, int dh, double* g) const override;
    void grad_y(const double* x, int dx, const double* h, int dh, double* g) const override;

private:
    LoglossMode mode_;
    double c_;
};

// ---------------------------------------------------------------------------
// Energy terms. Each term belongs to one species' energy F_owner and declares
// the species whose measures it integrates (subject, and possibly `other`).
// ---------------------------------------------------------------------------
class EnergySpec;

struct EvalContext;

class Term {
public:
    virtual ~Term() = default;

    int subject = 0;      // species whose measure the term integrates first
    double weight = 1.0;  // scalar multiplier (spectator terms may be negative)

    virtual std::string type_name() const = 0;
    virtual bool involves(int i) const { return i == subject; }
    virtual int other_species() const { return -1; }

    // contribution to delta_{rho_i}(term) over species i's grid cells
    virtual void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const = 0;

    // gradient of delta_{rho_i}(term) at an arbitrary point (length dim_i);
    // default falls back to central differences of point_first_variation
    virtual void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const;

    virtual double point_first_variation(EvalContext& ctx, int i, const double* x) const;

    virtual double value(EvalContext& ctx) const = 0;

    // alpha * max(U''(rho) rho) for the parabolic CFL bound (0 for transport terms)
    virtual double diffusion_strength(EvalContext& ctx, int i) const;

    virtual bool is_diffusive() const { return false; }

    // Second-order (Hessian) blocks for the quadratic-form reformulation.
    virtual bool second_order_ready() const { return false; }
    // diag block: adds weight * Hess_x delta_{rho_i}(term)(x) into H (d_i x d_i)
    virtual void add_diag_hessian(EvalContext& ctx, int i, const double* x, SmallMat& H) const;
    // cross block (i,j): adds weight * d^2_{x_i, xh_j} delta^2(term) into H
    virtual void add_cross_hessian(EvalContext& ctx, int i, int j, const double* xi,
                                   const double* xj, SmallMat& H) const;
    virtual bool has_cross_block(int i, int j) const { (void)i; (void)j; return false; }

    // optional precomputation bound to the grids of a template state
    virtual void prepare(const EnergySpec& spec, const SystemState& tmpl) { (void)spec; (void)tmpl; }
};

using TermPtr = std::unique_ptr<Term>;

TermPtr make_potential(int subject, RadialProfile prof, double weight = 1.0);
TermPtr make_cross_interaction(int subject, int other, std::shared_ptr<const Kernel2> W,
                               double weight = 1.0);
TermPtr make_self_interaction(int subject, RadialProfile prof, double weight = 1.0);
TermPtr make_diffusion(int subject, double m, double alpha, double weight = 1.0);
TermPtr make_kl(int subject, DensityField reference, double alpha, double weight = 1.0);
TermPtr make_bilinear(int subject, int other, SmallMat A, int sign, double weight = 1.0);
// f(x) = 1/2 x^T Q x + q^T x over the concatenated tuple, lifted per species
TermPtr make_quadratic_form_cost(int subject, SmallMat Q, std::vector<double> q,
                                 std::vector<int> block_offsets, double weight = 1.0);
TermPtr make_allocated_utility(int population, double weight = 1.0);
TermPtr make_allocated_loss(int provider, double weight = 1.0);

// ---------------------------------------------------------------------------
// Allocation model of the multi-learner system (softmax weights over expected
// utilities, recomputed pointwise in time).
// ---------------------------------------------------------------------------
struct AllocationModel {
    std::vector<int> populations;  // species indices carrying densities
    std::vector<int> providers;    // Dirac species indices
    double eta = 0.0;
    double steepness = 1.0;        // logistic steepness c
    LoglossMode utility_mode = LoglossMode::Prob;
    // loss l_ij of provider j against population i (indexed by population slot)
    std::vector<LoglossMode> loss_modes;
};

// softmax rows over eta * expected utility, guarded against overflow
std::vector<std::vector<double>> allocation_softmax(
    const std::vector<std::vector<double>>& expected_utility, double eta);

// ---------------------------------------------------------------------------
// Per-species velocity produced by assemble_velocity.
// ---------------------------------------------------------------------------
struct SpeciesVelocity {
    bool dirac = false;
    VectorField field;                                   // grid species
    std::vector<double> vec;                             // dirac species
    std::function<void(const double*, double*)> fn;      // optional oracle

    void eval(const double* x, double* out) const {
        if (fn) {
            fn(x, out);
            return;
        }
        if (dirac) {
            for (std::size_t a = 0; a < vec.size(); ++a) out[a] = vec[a];
            return;
        }
        field.sample(x, out);
    }
    int dim() const {
        if (dirac) return static_cast<int>(vec.size());
        return field.grid->dim();
    }
};

struct Velocities {
    std::vector<SpeciesVelocity> v;
};

// ---------------------------------------------------------------------------
// EnergySpec: the family F = (F_i).
// ---------------------------------------------------------------------------
struct SpeciesSpec {
    bool dirac = false;
    int dim = 1;
    GridPtr grid;  // set for grid species; also used by measure samplers
    std::vector<TermPtr> terms;
};

class EnergySpec {
public:
    std::vector<SpeciesSpec> species;
    std::optional<AllocationModel> allocation;

    int n() const { return static_cast<int>(species.size()); }

    void validate() const;

    // precompute static per-grid caches (potential fields, kernel offset tables)
    void prepare(const SystemState& tmpl);

    std::vector<double> first_variation(const SystemState& st, int i) const;
    void first_variation_into(EvalContext& ctx, int i, std::vector<double>& out) const;

    Velocities assemble_velocity(const SystemState& st) const;

    double energy_value(const SystemState& st, int i) const;
    double energy_value_ctx(EvalContext& ctx, int i) const;

    std::vector<std::vector<double>> allocation_weights(const SystemState& st) const;

    // max over species of alpha * max(U'' rho) (parabolic CFL input)
    double diffusion_strength(const SystemState& st, int i) const;

    bool has_diffusion_like_terms() const;  // diffusion or KL anywhere

    // analytic velocity gradient for Dirac-valued species in `st`
    std::vector<double> dirac_velocity(const SystemState& st, int i) const;
};

// Shared caches for one (spec, state) evaluation pass.
struct EvalContext {
    const EnergySpec& spec;
    const SystemState& st;

    EvalContext(const EnergySpec& s, const SystemState& x) : spec(s), st(x) {}

    const std::vector<double>& mean(int i);
    const SmallMat& second_moment_matrix(int i);

    struct Allocation {
        std::vector<std::vector<double>> a;         // populations x providers
        std::vector<std::vector<std::vector<double>>> utility_fields;  // [pop][prov][cell]
        std::vector<std::vector<double>> expected_utility;
    };
    const Allocation& allocation();

    // Pin the allocation weights (treated as exogenous pointwise-in-time data),
    // e.g. to take variations of F_i at frozen a_ij.
    void preset_allocation(Allocation a) { alloc_ = std::move(a); }

private:
    std::vector<std::vector<double>> means_;
    std::vector<char> mean_ready_;
    std::vector<SmallMat> smm_;
    std::vector<char> smm_ready_;
    std::optional<Allocation> alloc_;
};

inline constexpr double kDensityFloor = 1e-300;  // only inside logarithms

}  // namespace monoflow
