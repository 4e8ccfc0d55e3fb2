#pragma once

#include <vector>

#include "monoflow/grid.hpp"

namespace monoflow {

// One species: either a density on a grid or a point mass (Dirac) at `point`.
struct SpeciesState {
    bool dirac = false;
    DensityField field;          // valid when !dirac
    std::vector<double> point;   // valid when dirac

    int dim() const { return dirac ? static_cast<int>(point.size()) : field.grid->dim(); }

    static SpeciesState make_grid(DensityField f) {
        SpeciesState s;
        s.dirac = false;
        s.field = std::move(f);
        return s;
    }
    static SpeciesState make_dirac(std::vector<double> p) {
        SpeciesState s;
        s.dirac = true;
        s.point = std::move(p);
        return s;
    }
};

struct SystemState {
    double t = 0.0;
    std::vector<SpeciesState> species;

    int n() const { return static_cast<int>(species.size()); }
};

}  // namespace monoflow
