#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "monoflow/common.hpp"

namespace monoflow {

// Uniform rectangular grid in 1 or 2 dimensions. Densities are stored as
// cell averages, velocities at cell centers.
struct GridSpec {
    int dim = 1;
    std::vector<double> lower;
    std::vector<double> upper;
    std::vector<int> cells;
};

class Grid {
public:
    explicit Grid(GridSpec spec);

    int dim() const { return spec_.dim; }
    int cells(int axis) const { return spec_.cells[axis]; }
    std::size_t size() const { return size_; }
    double spacing(int axis) const { return h_[axis]; }
    double cell_volume() const { return volume_; }
    double lower(int axis) const { return spec_.lower[axis]; }
    double upper(int axis) const { return spec_.upper[axis]; }
    const std::vector<double>& axis_centers(int axis) const { return centers_[axis]; }
    const GridSpec& spec() const { return spec_; }

    // row-major with x fastest
    std::size_t index(int ix, int iy = 0) const {
        return static_cast<std::size_t>(iy) * spec_.cells[0] + ix;
    }
    void coords(std::size_t idx, int& ix, int& iy) const {
        ix = static_cast<int>(idx % spec_.cells[0]);
        iy = static_cast<int>(idx / spec_.cells[0]);
    }
    void cell_center(std::size_t idx, double* out) const {
        int ix, iy;
        coords(idx, ix, iy);
        out[0] = centers_[0][ix];
        if (spec_.dim == 2) out[1] = centers_[1][iy];
    }

    bool same_layout(const Grid& other) const;

private:
    GridSpec spec_;
    std::array<std::vector<double>, 2> centers_;
    std::array<double, 2> h_{0.0, 0.0};
    double volume_ = 0.0;
    std::size_t size_ = 0;
};

using GridPtr = std::shared_ptr<const Grid>;

GridPtr build_grid(GridSpec spec);

// Probability density as cell averages; mass(f) = sum values * cell_volume.
struct DensityField {
    GridPtr grid;
    std::vector<double> values;

    double mass() const;
    // throws if values are negative or mass is off by more than tol
    void validate(double tol = 1e-10) const;
};

// Cell-centered velocity field; off-center queries use bilinear interpolation
// with nearest-cell extension outside the box.
struct VectorField {
    GridPtr grid;
    std::array<std::vector<double>, 2> comp;

    void sample(const double* x, double* out) const;
    double max_abs(int axis) const;
    bool all_finite() const;
};

double integrate(std::span<const double> f, const Grid& g);

// second-order central differences in the interior, one-sided at boundaries
VectorField gradient(std::span<const double> f, const GridPtr& g);
void gradient_into(std::span<const double> f, const Grid& g, VectorField& out);

// mass in the outermost cell layer
double boundary_mass(const DensityField& f);

}  // namespace monoflow
