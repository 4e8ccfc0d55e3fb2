#pragma once

#include <cstddef>
#include <vector>

#include "monoflow/grid.hpp"
#include "monoflow/state.hpp"

namespace monoflow {

// Weighted point cloud; weights are strictly positive and sum to 1.
struct DiscreteMeasure {
    int dim = 1;
    std::vector<double> points;   // size() * dim, row-major
    std::vector<double> weights;

    std::size_t size() const { return weights.size(); }
    const double* point(std::size_t k) const { return points.data() + k * dim; }
    void push(const double* x, double w) {
        points.insert(points.end(), x, x + dim);
        weights.push_back(w);
    }
    double total_mass() const;
    void validate(double tol = 1e-10) const;
};

struct PlanEntry {
    int row, col;
    double mass;
};

// Coupling between source and target with prescribed marginals.
struct TransportPlan {
    DiscreteMeasure source, target;
    std::vector<PlanEntry> entries;
    bool optimal = false;

    double quadratic_cost() const;
    // max marginal violation against source/target weights
    double marginal_error() const;
};

struct W2Result {
    double distance = 0.0;
    TransportPlan plan;
};

// Exact quadratic-cost optimal transport via network simplex on the dense
// bipartite graph. Deterministic pivot order; support sizes are capped at
// kMaxSupport per side (coarsen first for larger inputs).
inline constexpr std::size_t kMaxSupport = 4096;

W2Result w2_exact(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

// Embed every positive cell as a point at its center.
DiscreteMeasure embed(const DensityField& f);

// Aggregate cells into blocks (mass-weighted centroids) until the support
// fits max_support points; total mass is preserved exactly.
DiscreteMeasure coarsen(const DensityField& f, std::size_t max_support);

DiscreteMeasure measure_of_species(const SpeciesState& s, std::size_t max_support);

// sqrt of the sum of squared per-species W2 distances
double joint_w2(const SystemState& a, const SystemState& b,
                std::size_t coarsen_to = 1024);

DiscreteMeasure displacement_interpolant(const TransportPlan& plan, double s);

// independence coupling gamma_kl = w_k v_l (admissible, generally not optimal)
TransportPlan product_plan(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

}  // namespace monoflow
