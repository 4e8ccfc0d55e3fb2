#include "monoflow/grid.hpp"

#include <algorithm>
#include <cmath>

namespace monoflow {

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int k = 0; k < n; ++k) s += a[k] * b[k];
    return s;
}

double sqnorm(const double* a, int n) { return dot(a, a, n); }

double min_eig_sym_part(const std::vector<std::vector<double>>& A, double tol) {
    const int n = static_cast<int>(A.size());
    std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) s[i][j] = 0.5 * (A[i][j] + A[j][i]);

    if (n == 1) return s[0][0];
    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += s[p][q] * s[p][q];
        if (off < tol * tol) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(s[p][q]) < 1e-300) continue;
                double theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double sn = t * c;
                for (int k = 0; k < n; ++k) {
                    double skp = s[k][p], skq = s[k][q];
                    s[k][p] = c * skp - sn * skq;
                    s[k][q] = sn * skp + c * skq;
                }
                for (int k = 0; k < n; ++k) {
                    double spk = s[p][k], sqk = s[q][k];
                    s[p][k] = c * spk - sn * sqk;
                    s[q][k] = sn * spk + c * sqk;
                }
            }
        }
    }
    double lo = s[0][0];
    for (int i = 1; i < n; ++i) lo = std::min(lo, s[i][i]);
    return lo;
}

Grid::Grid(GridSpec spec) : spec_(std::move(spec)) {
    if (spec_.dim != 1 && spec_.dim != 2)
        throw ConfigError("grid: dim must be 1 or 2, got " + std::to_string(spec_.dim));
    if (static_cast<int>(spec_.lower.size()) != spec_.dim ||
        static_cast<int>(spec_.upper.size()) != spec_.dim ||
        static_cast<int>(spec_.cells.size()) != spec_.dim)
        throw ConfigError("grid: lower/upper/cells must each have length dim");

    volume_ = 1.0;
    size_ = 1;
    for (int a = 0; a < spec_.dim; ++a) {
        if (spec_.cells[a] <= 0)
            throw ConfigError("grid: cell count must be positive on axis " + std::to_string(a));
        if (!(spec_.upper[a] > spec_.lower[a]))
            throw ConfigError("grid: upper must exceed lower on axis " + std::to_string(a));
        h_[a] = (spec_.upper[a] - spec_.lower[a]) / spec_.cells[a];
        volume_ *= h_[a];
        size_ *= static_cast<std::size_t>(spec_.cells[a]);
        centers_[a].resize(spec_.cells[a]);
        for (int j = 0; j < spec_.cells[a]; ++j)
            centers_[a][j] = spec_.lower[a] + (j + 0.5) * h_[a];
    }
}

bool Grid::same_layout(const Grid& other) const {
    if (spec_.dim != other.spec_.dim) return false;
    for (int a = 0; a < spec_.dim; ++a) {
        if (spec_.cells[a] != other.spec_.cells[a]) return false;
        if (spec_.lower[a] != other.spec_.lower[a]) return false;
        if (spec_.upper[a] != other.spec_.upper[a]) return false;
    }
    return true;
}

GridPtr build_grid(GridSpec spec) { return std::make_shared<const Grid>(std::move(spec)); }

double DensityField::mass() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s * grid->cell_volume();
}

void DensityField::validate(double tol) const {
    if (values.size() != grid->size())
        throw ConfigError("density: value count does not match grid size");
    for (double v : values)
        if (!(v >= 0.0)) throw RuntimeError("density: negative or NaN cell value");
    double m = mass();
    if (std::abs(m - 1.0) > tol)
        throw RuntimeError("density: mass " + std::to_string(m) + " deviates from 1");
}

void VectorField::sample(const double* x, double* out) const {
    const Grid& g = *grid;
    const int d = g.dim();
    // clamped fractional index per axis
    double fx[2] = {0.0, 0.0};
    int i0[2] = {0, 0};
    double w1[2] = {0.0, 0.0};
    for (int a = 0; a < d; ++a) {
        const auto& c = g.axis_centers(a);
        double t = (x[a] - c.front()) / g.spacing(a);
        t = std::clamp(t, 0.0, static_cast<double>(g.cells(a) - 1));
        i0[a] = std::min(static_cast<int>(t), g.cells(a) - 2);
        if (g.cells(a) == 1) i0[a] = 0;
        w1[a] = t - i0[a];
        if (g.cells(a) == 1) w1[a] = 0.0;
        fx[a] = t;
    }
    (void)fx;
    if (d == 1) {
        int i = i0[0];
        double w = w1[0];
        out[0] = (1.0 - w) * comp[0][i] + w * comp[0][std::min(i + 1, g.cells(0) - 1)];
        return;
    }
    int ix = i0[0], iy = i0[1];
    int ix1 = std::min(ix + 1, g.cells(0) - 1);
    int iy1 = std::min(iy + 1, g.cells(1) - 1);
    double wx = w1[0], wy = w1[1];
    for (int a = 0; a < 2; ++a) {
        const auto& v = comp[a];
        double v00 = v[g.index(ix, iy)], v10 = v[g.index(ix1, iy)];
        double v01 = v[g.index(ix, iy1)], v11 = v[g.index(ix1, iy1)];
        out[a] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v10) +
                 wy * ((1.0 - wx) * v01 + wx * v11);
    }
}

double VectorField::max_abs(int axis) const {
    double m = 0.0;
    for (double v : comp[axis]) m = std::max(m, std::abs(v));
    return m;
}

bool VectorField::all_finite() const {
    for (int a = 0; a < grid->dim(); ++a)
        for (double v : comp[a])
            if (!std::isfinite(v)) return false;
    return true;
}

double integrate(std::span<const double> f, const Grid& g) {
    if (f.size() != g.size())
        throw ConfigError("integrate: field size does not match grid");
    double s = 0.0;
    for (double v : f) s += v;
    return s * g.cell_volume();
}

void gradient_into(std::span<const double> f, const Grid& g, VectorField& out) {
    if (f.size() != g.size())
        throw ConfigError("gradient: field size does not match grid");
    for (int a = 0; a < g.dim(); ++a) {
        if (g.cells(a) < 2)
            throw ConfigError("gradient: need at least 2 cells per axis");
        out.comp[a].resize(g.size());
    }
    const int nx = g.cells(0);
    const double hx = g.spacing(0);
    if (g.dim() == 1) {
        auto& gx = out.comp[0];
        gx[0] = (f[1] - f[0]) / hx;
        for (int i = 1; i < nx - 1; ++i) gx[i] = (f[i + 1] - f[i - 1]) / (2.0 * hx);
        gx[nx - 1] = (f[nx - 1] - f[nx - 2]) / hx;
        return;
    }
    const int ny = g.cells(1);
    const double hy = g.spacing(1);
    auto& gx = out.comp[0];
    auto& gy = out.comp[1];
    for (int iy = 0; iy < ny; ++iy) {
        const std::size_t row = g.index(0, iy);
        gx[row] = (f[row + 1] - f[row]) / hx;
        for (int ix = 1; ix < nx - 1; ++ix)
            gx[row + ix] = (f[row + ix + 1] - f[row + ix - 1]) / (2.0 * hx);
        gx[row + nx - 1] = (f[row + nx - 1] - f[row + nx - 2]) / hx;
    }
    for (int ix = 0; ix < nx; ++ix) {
        gy[g.index(ix, 0)] = (f[g.index(ix, 1)] - f[g.index(ix, 0)]) / hy;
        for (int iy = 1; iy < ny - 1; ++iy)
            gy[g.index(ix, iy)] =
                (f[g.index(ix, iy + 1)] - f[g.index(ix, iy - 1)]) / (2.0 * hy);
        gy[g.index(ix, ny - 1)] =
            (f[g.index(ix, ny - 1)] - f[g.index(ix, ny - 2)]) / hy;
    }
}

VectorField gradient(std::span<const double> f, const GridPtr& g) {
    VectorField out;
    out.grid = g;
    gradient_into(f, *g, out);
    return out;
}

double boundary_mass(const DensityField& f) {
    const Grid& g = *f.grid;
    double s = 0.0;
    if (g.dim() == 1) {
        s = f.values.front() + f.values.back();
    } else {
        const int nx = g.cells(0), ny = g.cells(1);
        for (int ix = 0; ix < nx; ++ix)
            s += f.values[g.index(ix, 0)] + f.values[g.index(ix, ny - 1)];
        for (int iy = 1; iy < ny - 1; ++iy)
            s += f.values[g.index(0, iy)] + f.values[g.index(nx - 1, iy)];
    }
    return s * g.cell_volume();
}

}  // namespace monoflow
