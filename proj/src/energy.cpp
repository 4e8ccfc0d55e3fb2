#include "monoflow/energy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace monoflow {

// ---------------------------------------------------------------------------
// RadialProfile
// ---------------------------------------------------------------------------
double RadialProfile::w(double r) const {
    switch (family) {
        case Family::Quadratic: return 0.5 * r * r;
        case Family::Quartic: return r * r * r * r;
        case Family::Power: return std::pow(r, k) / k;
        case Family::PowerLaw: return std::pow(r, a) / a - std::pow(r, b) / b;
        case Family::Morse:
            return cr * std::exp(-r * r / lr) - ca * std::exp(-r * r / la);
    }
    return 0.0;
}

double RadialProfile::phi(double r) const {
    switch (family) {
        case Family::Quadratic: return 1.0;
        case Family::Quartic: return 4.0 * r * r;
        case Family::Power: return k == 2.0 ? 1.0 : std::pow(r, k - 2.0);
        case Family::PowerLaw: {
            double pa = (a == 2.0) ? 1.0 : std::pow(r, a - 2.0);
            double pb = (b == 2.0) ? 1.0 : std::pow(r, b - 2.0);
            return pa - pb;
        }
        case Family::Morse:
            return 2.0 * (-cr / lr * std::exp(-r * r / lr) +
                          ca / la * std::exp(-r * r / la));
    }
    return 0.0;
}

double RadialProfile::psi(double r) const {
    switch (family) {
        case Family::Quadratic: return 0.0;
        case Family::Quartic: return 8.0;
        case Family::Power:
            return k == 2.0 ? 0.0 : (k - 2.0) * std::pow(r, k - 4.0);
        case Family::PowerLaw: {
            double pa = (a == 2.0) ? 0.0 : (a - 2.0) * std::pow(r, a - 4.0);
            double pb = (b == 2.0) ? 0.0 : (b - 2.0) * std::pow(r, b - 4.0);
            return pa - pb;
        }
        case Family::Morse:
            return 4.0 * (cr / (lr * lr) * std::exp(-r * r / lr) -
                          ca / (la * la) * std::exp(-r * r / la));
    }
    return 0.0;
}

double RadialProfile::value(const double* z, int d) const {
    return w(std::sqrt(sqnorm(z, d)));
}

void RadialProfile::gradient(const double* z, int d, double* g) const {
    double p = phi(std::sqrt(sqnorm(z, d)));
    for (int a_ = 0; a_ < d; ++a_) g[a_] = p * z[a_];
}

void RadialProfile::hessian(const double* z, int d, double* H) const {
    double r = std::sqrt(sqnorm(z, d));
    double p = phi(r), q = psi(r);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            H[i * d + j] = q * z[i] * z[j] + (i == j ? p : 0.0);
}

RadialProfile RadialProfile::named(const std::string& name,
                                   const std::vector<double>& params) {
    RadialProfile p;
    auto need = [&](std::size_t n) {
        if (params.size() != n)
            throw ConfigError("profile '" + name + "' expects " + std::to_string(n) +
                              " parameter(s)");
    };
    if (name == "quadratic") {
        need(0);
        p.family = Family::Quadratic;
    } else if (name == "quartic") {
        need(0);
        p.family = Family::Quartic;
    } else if (name == "power") {
        need(1);
        p.family = Family::Power;
        p.k = params[0];
        if (p.k <= 0) throw ConfigError("power profile: k must be positive");
    } else if (name == "power_law") {
        need(2);
        p.family = Family::PowerLaw;
        p.a = params[0];
        p.b = params[1];
        if (!(p.a > p.b)) throw ConfigError("power_law profile: need a > b");
    } else if (name == "morse") {
        need(4);
        p.family = Family::Morse;
        p.cr = params[0];
        p.lr = params[1];
        p.ca = params[2];
        p.la = params[3];
        if (!(p.lr > 0 && p.la > 0))
            throw ConfigError("morse profile: length scales must be positive");
    } else {
        throw ConfigError("unknown radial profile '" + name + "'");
    }
    return p;
}

// ---------------------------------------------------------------------------
// Kernel2
// ---------------------------------------------------------------------------
void Kernel2::grad_x(const double* x, int dx, const double* y, int dy, double* g) const {
    double xp[2] = {0.0, 0.0};
    for (int a = 0; a < dx; ++a) {
        std::memcpy(xp, x, sizeof(double) * dx);
        double h = 1e-6 * (1.0 + std::abs(x[a]));
        xp[a] = x[a] + h;
        double fp = value(xp, dx, y, dy);
        xp[a] = x[a] - h;
        double fm = value(xp, dx, y, dy);
        g[a] = (fp - fm) / (2.0 * h);
    }
}

void Kernel2::grad_y(const double* x, int dx, const double* y, int dy, double* g) const {
    double yp[2] = {0.0, 0.0};
    for (int a = 0; a < dy; ++a) {
        std::memcpy(yp, y, sizeof(double) * dy);
        double h = 1e-6 * (1.0 + std::abs(y[a]));
        yp[a] = y[a] + h;
        double fp = value(x, dx, yp, dy);
        yp[a] = y[a] - h;
        double fm = value(x, dx, yp, dy);
        g[a] = (fp - fm) / (2.0 * h);
    }
}

void Kernel2::hess_xx(const double*, int, const double*, int, SmallMat&) const {
    throw RuntimeError("kernel does not provide Hessians");
}
void Kernel2::hess_xy(const double*, int, const double*, int, SmallMat&) const {
    throw RuntimeError("kernel does not provide Hessians");
}

double RadialKernel2::value(const double* x, int dx, const double* y, int dy) const {
    (void)dy;
    double z[2] = {0.0, 0.0};
    for (int a = 0; a < dx; ++a) z[a] = x[a] - y[a];
    return prof_.value(z, dx);
}
void RadialKernel2::grad_x(const double* x, int dx, const double* y, int dy, double* g) const {
    (void)dy;
    double z[2] = {0.0, 0.0};
    for (int a = 0; a < dx; ++a) z[a] = x[a] - y[a];
    prof_.gradient(z, dx, g);
}
void RadialKernel2::grad_y(const double* x, int dx, const double* y, int dy, double* g) const {
    grad_x(x, dx, y, dy, g);
    for (int a = 0; a < dx; ++a) g[a] = -g[a];
}
void RadialKernel2::hess_xx(const double* x, int dx, const double* y, int dy, SmallMat& H) const {
    (void)dy;
    double z[2] = {0.0, 0.0}, buf[4] = {0.0, 0.0, 0.0, 0.0};
    for (int a = 0; a < dx; ++a) z[a] = x[a] - y[a];
    prof_.hessian(z, dx, buf);
    H.rows = H.cols = dx;
    H.a.assign(buf, buf + dx * dx);
}
void RadialKernel2::hess_xy(const double* x, int dx, const double* y, int dy, SmallMat& H) const {
    hess_xx(x, dx, y, dy, H);
    for (double& v : H.a) v = -v;
}

double QuadCrossKernel::value(const double* x, int dx, const double* y, int dy) const {
    if (B_.rows != dx || B_.cols != dy)
        throw ConfigError("quad_cross kernel: B must be d_subject x d_other");
    double s = 0.5 * c_ * sqnorm(x, dx);
    for (int i = 0; i < dx; ++i)
        for (int j = 0; j < dy; ++j) s += x[i] * B_.at(i, j) * y[j];
    return s;
}
void QuadCrossKernel::grad_x(const double* x, int dx, const double* y, int dy, double* g) const {
    for (int i = 0; i < dx; ++i) {
        g[i] = c_ * x[i];
        for (int j = 0; j < dy; ++j) g[i] += B_.at(i, j) * y[j];
    }
}
void QuadCrossKernel::grad_y(const double* x, int dx, const double* y, int dy, double* g) const {
    (void)y;
    for (int j = 0; j < dy; ++j) {
        g[j] = 0.0;
        for (int i = 0; i < dx; ++i) g[j] += B_.at(i, j) * x[i];
    }
}
void QuadCrossKernel::hess_xx(const double*, int dx, const double*, int, SmallMat& H) const {
    H = SmallMat::zero(dx, dx);
    for (int i = 0; i < dx; ++i) H.at(i, i) = c_;
}
void QuadCrossKernel::hess_xy(const double*, int dx, const double*, int dy, SmallMat& H) const {
    H = SmallMat::zero(dx, dy);
    for (int i = 0; i < dx; ++i)
        for (int j = 0; j < dy; ++j) H.at(i, j) = B_.at(i, j);
}

namespace {
double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}
double log_sigmoid(double z) {  // log p
    return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}
}  // namespace

double LoglossKernel::value(const double* x, int dx, const double* h, int dh) const {
    if (dx != 2 || dh != 2)
        throw ConfigError("logloss kernel expects 2-d features and 2-d classifiers");
    double z = c_ * (std::cos(h[0]) * x[0] + std::sin(h[0]) * x[1]) - h[1];
    switch (mode_) {
        case LoglossMode::Prob: return stable_sigmoid(z);
        case LoglossMode::LogProb: return log_sigmoid(z);
        case LoglossMode::LogOneMinus: return log_sigmoid(-z);
    }
    return 0.0;
}

void LoglossKernel::grad_x(const double* x, int dx, const double* h, int dh, double* g) const {
    if (dx != 2 || dh != 2) throw ConfigError("logloss kernel expects 2-d arguments");
    double th0 = std::cos(h[0]), th1 = std::sin(h[0]);
    double z = c_ * (th0 * x[0] + th1 * x[1]) - h[1];
    double p = stable_sigmoid(z);
    double f = 0.0;
    switch (mode_) {
        case LoglossMode::Prob: f = p * (1.0 - p); break;
        case LoglossMode::LogProb: f = 1.0 - p; break;
        case LoglossMode::LogOneMinus: f = -p; break;
    }
    g[0] = f * c_ * th0;
    g[1] = f * c_ * th1;
}

void LoglossKernel::grad_y(const double* x, int dx, const double* h, int dh, double* g) const {
    if (dx != 2 || dh != 2) throw ConfigError("logloss kernel expects 2-d arguments");
    double th0 = std::cos(h[0]), th1 = std::sin(h[0]);
    double z = c_ * (th0 * x[0] + th1 * x[1]) - h[1];
    double p = stable_sigmoid(z);
    double f = 0.0;
    switch (mode_) {
        case LoglossMode::Prob: f = p * (1.0 - p); break;
        case LoglossMode::LogProb: f = 1.0 - p; break;
        case LoglossMode::LogOneMinus: f = -p; break;
    }
    // dz/dh = (c(-sin h0 x0 + cos h0 x1), -1)
    g[0] = f * c_ * (-th1 * x[0] + th0 * x[1]);
    g[1] = -f;
}

// ---------------------------------------------------------------------------
// Term defaults
// ---------------------------------------------------------------------------
void Term::add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const {
    const int d = ctx.st.species[i].dim();
    double xp[2] = {0.0, 0.0};
    for (int a = 0; a < d; ++a) {
        std::memcpy(xp, x, sizeof(double) * d);
        double h = 1e-6 * (1.0 + std::abs(x[a]));
        xp[a] = x[a] + h;
        double fp = point_first_variation(ctx, i, xp);
        xp[a] = x[a] - h;
        double fm = point_first_variation(ctx, i, xp);
        g[a] += (fp - fm) / (2.0 * h);
    }
}

double Term::point_first_variation(EvalContext&, int, const double*) const {
    throw RuntimeError("term '" + type_name() + "' has no pointwise first variation");
}

double Term::diffusion_strength(EvalContext&, int) const { return 0.0; }

void Term::add_diag_hessian(EvalContext&, int, const double*, SmallMat&) const {
    throw RuntimeError("term '" + type_name() + "' has no closed-form Hessian");
}
void Term::add_cross_hessian(EvalContext&, int, int, const double*, const double*,
                             SmallMat&) const {
    throw RuntimeError("term '" + type_name() + "' has no closed-form cross Hessian");
}

namespace {

// iterate over the support of one species: f(point, mass)
template <class F>
void for_support(const SpeciesState& s, F&& f) {
    if (s.dirac) {
        f(s.point.data(), 1.0);
        return;
    }
    const Grid& g = *s.field.grid;
    const double vol = g.cell_volume();
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g.size(); ++c) {
        double m = s.field.values[c] * vol;
        if (m == 0.0) continue;
        g.cell_center(c, x);
        f(x, m);
    }
}

// kernel offset table for translation-invariant kernels on identical grids
struct ConvTable {
    GridPtr grid;
    int nx = 0, ny = 0;
    std::vector<double> t;  // (2ny-1) x (2nx-1), value of W at offset

    void build(GridPtr gp, const Kernel2& W) {
        grid = std::move(gp);
        const Grid& g = *grid;
        nx = g.cells(0);
        ny = g.dim() == 2 ? g.cells(1) : 1;
        t.assign(static_cast<std::size_t>(2 * ny - 1) * (2 * nx - 1), 0.0);
        double z[2] = {0.0, 0.0};
        double o[2] = {0.0, 0.0};
        for (int dy = -(ny - 1); dy <= ny - 1; ++dy) {
            for (int dx = -(nx - 1); dx <= nx - 1; ++dx) {
                z[0] = dx * g.spacing(0);
                if (g.dim() == 2) z[1] = dy * g.spacing(1);
                t[idx(dx, dy)] = W.value(z, g.dim(), o, g.dim());
            }
        }
    }
    std::size_t idx(int dx, int dy) const {
        return static_cast<std::size_t>(dy + ny - 1) * (2 * nx - 1) + (dx + nx - 1);
    }

    // out[c] += scale * sum_j t[c - j] * rho[j] * vol   (x - y offsets)
    void convolve(const DensityField& rho, double scale, std::span<double> out) const {
        const Grid& g = *grid;
        const double vol = g.cell_volume();
        if (g.dim() == 1) {
            for (int i = 0; i < nx; ++i) {
                const double* tb = &t[idx(i, 0)];
                double s = 0.0;
                for (int j = 0; j < nx; ++j) s += tb[-j] * rho.values[j];
                out[i] += scale * vol * s;
            }
            return;
        }
        for (int iy = 0; iy < ny; ++iy) {
            for (int ix = 0; ix < nx; ++ix) {
                double s = 0.0;
                for (int jy = 0; jy < ny; ++jy) {
                    const double* tb = &t[idx(ix, iy - jy)];
                    const double* rrow = &rho.values[static_cast<std::size_t>(jy) * nx];
                    double acc = 0.0;
                    for (int jx = 0; jx < nx; ++jx) acc += tb[-jx] * rrow[jx];
                    s += acc;
                }
                out[static_cast<std::size_t>(iy) * nx + ix] += scale * vol * s;
            }
        }
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// Potential
// ---------------------------------------------------------------------------
namespace {

class PotentialTerm final : public Term {
public:
    PotentialTerm(int subj, RadialProfile prof, double w) : prof_(prof) {
        subject = subj;
        weight = w;
    }
    std::string type_name() const override { return "potential"; }

    void prepare(const EnergySpec&, const SystemState& tmpl) override {
        const SpeciesState& s = tmpl.species[subject];
        if (s.dirac) return;
        cached_grid_ = s.field.grid.get();
        cache_.resize(cached_grid_->size());
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < cache_.size(); ++c) {
            cached_grid_->cell_center(c, x);
            cache_[c] = prof_.value(x, cached_grid_->dim());
        }
    }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        const Grid& g = *s.field.grid;
        if (&g == cached_grid_) {
            for (std::size_t c = 0; c < out.size(); ++c) out[c] += weight * cache_[c];
            return;
        }
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < out.size(); ++c) {
            g.cell_center(c, x);
            out[c] += weight * prof_.value(x, g.dim());
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        if (i != subject) return 0.0;
        return weight * prof_.value(x, ctx.st.species[i].dim());
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        if (i != subject) return;
        const int d = ctx.st.species[i].dim();
        double buf[2] = {0.0, 0.0};
        prof_.gradient(x, d, buf);
        for (int a = 0; a < d; ++a) g[a] += weight * buf[a];
    }

    double value(EvalContext& ctx) const override {
        const SpeciesState& s = ctx.st.species[subject];
        if (s.dirac) return weight * prof_.value(s.point.data(), s.dim());
        double acc = 0.0;
        if (s.field.grid.get() == cached_grid_) {
            for (std::size_t c = 0; c < cache_.size(); ++c)
                acc += cache_[c] * s.field.values[c];
            return weight * acc * s.field.grid->cell_volume();
        }
        const Grid& g = *s.field.grid;
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < g.size(); ++c) {
            g.cell_center(c, x);
            acc += prof_.value(x, g.dim()) * s.field.values[c];
        }
        return weight * acc * g.cell_volume();
    }

    bool second_order_ready() const override { return true; }
    void add_diag_hessian(EvalContext& ctx, int i, const double* x, SmallMat& H) const override {
        if (i != subject) return;
        const int d = ctx.st.species[i].dim();
        double buf[4] = {0.0, 0.0, 0.0, 0.0};
        prof_.hessian(x, d, buf);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) H.at(r, c) += weight * buf[r * d + c];
    }

private:
    RadialProfile prof_;
    const Grid* cached_grid_ = nullptr;
    std::vector<double> cache_;
};

// ---------------------------------------------------------------------------
// CrossInteraction
// ---------------------------------------------------------------------------
class CrossInteractionTerm final : public Term {
public:
    CrossInteractionTerm(int subj, int oth, std::shared_ptr<const Kernel2> W, double w)
        : other_(oth), W_(std::move(W)) {
        subject = subj;
        weight = w;
    }
    std::string type_name() const override { return "cross_interaction"; }
    bool involves(int i) const override { return i == subject || i == other_; }
    int other_species() const override { return other_; }

    void prepare(const EnergySpec&, const SystemState& tmpl) override {
        if (!W_->translation_invariant()) return;
        const SpeciesState& a = tmpl.species[subject];
        const SpeciesState& b = tmpl.species[other_];
        if (a.dirac || b.dirac) return;
        if (!a.field.grid->same_layout(*b.field.grid)) return;
        table_.emplace();
        table_->build(a.field.grid, *W_);
    }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        const int j = (i == subject) ? other_ : subject;
        const bool i_is_subject = (i == subject);
        const SpeciesState& si = ctx.st.species[i];
        const SpeciesState& sj = ctx.st.species[j];
        const Grid& g = *si.field.grid;

        if (!sj.dirac && table_ && table_->grid->same_layout(g) &&
            sj.field.grid->same_layout(g)) {
            // radial kernels are even, so the W(x - y) table covers both sides
            table_->convolve(sj.field, weight, out);
            return;
        }
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < out.size(); ++c) {
            g.cell_center(c, x);
            double acc = 0.0;
            for_support(sj, [&](const double* y, double m) {
                acc += m * (i_is_subject ? W_->value(x, g.dim(), y, sj.dim())
                                         : W_->value(y, sj.dim(), x, g.dim()));
            });
            out[c] += weight * acc;
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        const int j = (i == subject) ? other_ : subject;
        const bool i_is_subject = (i == subject);
        const SpeciesState& sj = ctx.st.species[j];
        const int di = ctx.st.species[i].dim();
        double acc = 0.0;
        for_support(sj, [&](const double* y, double m) {
            acc += m * (i_is_subject ? W_->value(x, di, y, sj.dim())
                                     : W_->value(y, sj.dim(), x, di));
        });
        return weight * acc;
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        const int j = (i == subject) ? other_ : subject;
        const bool i_is_subject = (i == subject);
        const SpeciesState& sj = ctx.st.species[j];
        const int di = ctx.st.species[i].dim();
        double buf[2] = {0.0, 0.0};
        for_support(sj, [&](const double* y, double m) {
            if (i_is_subject)
                W_->grad_x(x, di, y, sj.dim(), buf);
            else
                W_->grad_y(y, sj.dim(), x, di, buf);
            for (int a = 0; a < di; ++a) g[a] += weight * m * buf[a];
        });
    }

    double value(EvalContext& ctx) const override {
        const SpeciesState& ss = ctx.st.species[subject];
        const SpeciesState& so = ctx.st.species[other_];
        double acc = 0.0;
        for_support(ss, [&](const double* x, double mx) {
            double inner = 0.0;
            for_support(so, [&](const double* y, double my) {
                inner += my * W_->value(x, ss.dim(), y, so.dim());
            });
            acc += mx * inner;
        });
        return weight * acc;
    }

    bool second_order_ready() const override { return W_->hessians_ready(); }
    void add_diag_hessian(EvalContext& ctx, int i, const double* x, SmallMat& H) const override {
        const int j = (i == subject) ? other_ : subject;
        const bool i_is_subject = (i == subject);
        const SpeciesState& sj = ctx.st.species[j];
        const int di = ctx.st.species[i].dim();
        SmallMat buf;
        for_support(sj, [&](const double* y, double m) {
            if (i_is_subject) {
                W_->hess_xx(x, di, y, sj.dim(), buf);
            } else {
                // d^2/dy^2 of W(x, y); radial kernels equal hess_xx, quad_cross is 0
                hess_yy(*W_, y, sj.dim(), x, di, buf);
            }
            for (int r = 0; r < di; ++r)
                for (int c = 0; c < di; ++c) H.at(r, c) += weight * m * buf.at(r, c);
        });
    }
    bool has_cross_block(int i, int j) const override {
        return (i == subject && j == other_) || (i == other_ && j == subject);
    }
    void add_cross_hessian(EvalContext& ctx, int i, int j, const double* xi, const double* xj,
                           SmallMat& H) const override {
        const int di = ctx.st.species[i].dim();
        const int dj = ctx.st.species[j].dim();
        SmallMat buf;
        if (i == subject && j == other_) {
            W_->hess_xy(xi, di, xj, dj, buf);
        } else if (i == other_ && j == subject) {
            W_->hess_xy(xj, dj, xi, di, buf);
            // transpose
            SmallMat t = SmallMat::zero(di, dj);
            for (int r = 0; r < di; ++r)
                for (int c = 0; c < dj; ++c) t.at(r, c) = buf.at(c, r);
            buf = t;
        } else {
            return;
        }
        for (int r = 0; r < di; ++r)
            for (int c = 0; c < dj; ++c) H.at(r, c) += weight * buf.at(r, c);
    }

private:
    static void hess_yy(const Kernel2& W, const double* y, int dy, const double* x, int dx,
                        SmallMat& out);

    int other_;
    std::shared_ptr<const Kernel2> W_;
    std::optional<ConvTable> table_;
};

void CrossInteractionTerm::hess_yy(const Kernel2& W, const double* y, int dy, const double* x,
                                   int dx, SmallMat& out) {
    // For translation-invariant kernels Hess_y W(x-y) = Hess_x W(x-y).
    if (W.translation_invariant()) {
        W.hess_xx(y, dy, x, dx, out);
        return;
    }
    // quad_cross: (c/2)|x|^2 + x^T B y is linear in y
    out = SmallMat::zero(dy, dy);
    (void)x;
    (void)dx;
}

// ---------------------------------------------------------------------------
// SelfInteraction
// ---------------------------------------------------------------------------
class SelfInteractionTerm final : public Term {
public:
    SelfInteractionTerm(int subj, RadialProfile prof, double w)
        : prof_(prof), kern_(std::make_shared<RadialKernel2>(prof)) {
        subject = subj;
        weight = w;
    }
    std::string type_name() const override { return "self_interaction"; }

    void prepare(const EnergySpec&, const SystemState& tmpl) override {
        const SpeciesState& s = tmpl.species[subject];
        if (s.dirac) return;
        table_.emplace();
        table_->build(s.field.grid, *kern_);
    }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        const Grid& g = *s.field.grid;
        if (table_ && table_->grid->same_layout(g)) {
            table_->convolve(s.field, 2.0 * weight, out);
            return;
        }
        double x[2] = {0.0, 0.0};
        for (std::size_t c = 0; c < out.size(); ++c) {
            g.cell_center(c, x);
            double acc = 0.0;
            for_support(s, [&](const double* y, double m) {
                double z[2] = {0.0, 0.0};
                for (int a = 0; a < g.dim(); ++a) z[a] = x[a] - y[a];
                acc += m * prof_.value(z, g.dim());
            });
            out[c] += 2.0 * weight * acc;
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        if (i != subject) return 0.0;
        const SpeciesState& s = ctx.st.species[i];
        const int d = s.dim();
        double acc = 0.0;
        for_support(s, [&](const double* y, double m) {
            double z[2] = {0.0, 0.0};
            for (int a = 0; a < d; ++a) z[a] = x[a] - y[a];
            acc += m * prof_.value(z, d);
        });
        return 2.0 * weight * acc;
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        const int d = s.dim();
        double z[2] = {0.0, 0.0}, buf[2] = {0.0, 0.0};
        for_support(s, [&](const double* y, double m) {
            for (int a = 0; a < d; ++a) z[a] = x[a] - y[a];
            prof_.gradient(z, d, buf);
            for (int a = 0; a < d; ++a) g[a] += 2.0 * weight * m * buf[a];
        });
    }

    double value(EvalContext& ctx) const override {
        const SpeciesState& s = ctx.st.species[subject];
        const int d = s.dim();
        double acc = 0.0;
        for_support(s, [&](const double* x, double mx) {
            double inner = 0.0;
            for_support(s, [&](const double* y, double my) {
                double z[2] = {0.0, 0.0};
                for (int a = 0; a < d; ++a) z[a] = x[a] - y[a];
                inner += my * prof_.value(z, d);
            });
            acc += mx * inner;
        });
        return weight * acc;
    }

    bool second_order_ready() const override { return true; }
    void add_diag_hessian(EvalContext& ctx, int i, const double* x, SmallMat& H) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        const int d = s.dim();
        double z[2] = {0.0, 0.0}, buf[4] = {0.0, 0.0, 0.0, 0.0};
        for_support(s, [&](const double* y, double m) {
            for (int a = 0; a < d; ++a) z[a] = x[a] - y[a];
            prof_.hessian(z, d, buf);
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c) H.at(r, c) += 2.0 * weight * m * buf[r * d + c];
        });
    }
    bool has_cross_block(int i, int j) const override { return i == subject && j == subject; }
    void add_cross_hessian(EvalContext& ctx, int i, int, const double* xi, const double* xj,
                           SmallMat& H) const override {
        const int d = ctx.st.species[i].dim();
        double z[2] = {0.0, 0.0}, buf[4] = {0.0, 0.0, 0.0, 0.0};
        for (int a = 0; a < d; ++a) z[a] = xi[a] - xj[a];
        prof_.hessian(z, d, buf);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) H.at(r, c) += -2.0 * weight * buf[r * d + c];
    }

private:
    RadialProfile prof_;
    std::shared_ptr<RadialKernel2> kern_;
    std::optional<ConvTable> table_;
};

// ---------------------------------------------------------------------------
// Diffusion
// ---------------------------------------------------------------------------
class DiffusionTerm final : public Term {
public:
    DiffusionTerm(int subj, double m, double alpha, double w) : m_(m), alpha_(alpha) {
        subject = subj;
        weight = w;
    }
    std::string type_name() const override { return "diffusion"; }
    bool is_diffusive() const override { return true; }
    double m() const { return m_; }
    double alpha() const { return alpha_; }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        if (s.dirac) throw RuntimeError("diffusion is undefined on Dirac species");
        const auto& rho = s.field.values;
        const double wa = weight * alpha_;
        if (m_ == 1.0) {
            for (std::size_t c = 0; c < out.size(); ++c)
                out[c] += wa * (std::log(std::max(rho[c], kDensityFloor)) + 1.0);
        } else {
            const double f = m_ / (m_ - 1.0);
            for (std::size_t c = 0; c < out.size(); ++c)
                out[c] += wa * f * std::pow(rho[c], m_ - 1.0);
        }
    }

    double value(EvalContext& ctx) const override {
        const SpeciesState& s = ctx.st.species[subject];
        if (s.dirac) throw RuntimeError("diffusion is undefined on Dirac species");
        const auto& rho = s.field.values;
        double acc = 0.0;
        if (m_ == 1.0) {
            for (double r : rho)
                if (r > 0.0) acc += r * std::log(r);  // 0 log 0 = 0
        } else {
            for (double r : rho) acc += std::pow(r, m_) / (m_ - 1.0);
        }
        return weight * alpha_ * acc * s.field.grid->cell_volume();
    }

    double diffusion_strength(EvalContext& ctx, int i) const override {
        if (i != subject) return 0.0;
        const SpeciesState& s = ctx.st.species[i];
        if (s.dirac) return 0.0;
        if (m_ == 1.0) return std::abs(weight) * alpha_;
        double rmax = 0.0;
        for (double r : s.field.values) rmax = std::max(rmax, r);
        return std::abs(weight) * alpha_ * m_ * std::pow(rmax, m_ - 1.0);
    }

private:
    double m_, alpha_;
};

// ---------------------------------------------------------------------------
// KL divergence against a fixed positive reference
// ---------------------------------------------------------------------------
class KLTerm final : public Term {
public:
    KLTerm(int subj, DensityField ref, double alpha, double w)
        : ref_(std::move(ref)), alpha_(alpha) {
        subject = subj;
        weight = w;
        log_ref_.resize(ref_.values.size());
        for (std::size_t c = 0; c < log_ref_.size(); ++c) {
            if (!(ref_.values[c] > 0.0))
                throw ConfigError("KL reference must be strictly positive on the grid");
            log_ref_[c] = std::log(ref_.values[c]);
        }
    }
    std::string type_name() const override { return "kl"; }
    bool is_diffusive() const override { return true; }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        if (i != subject) return;
        const SpeciesState& s = ctx.st.species[i];
        if (s.dirac) throw RuntimeError("KL is undefined on Dirac species");
        if (!s.field.grid->same_layout(*ref_.grid))
            throw ConfigError("KL reference grid does not match species grid");
        const auto& rho = s.field.values;
        const double wa = weight * alpha_;
        for (std::size_t c = 0; c < out.size(); ++c)
            out[c] += wa * (std::log(std::max(rho[c], kDensityFloor)) - log_ref_[c] + 1.0);
    }

    double value(EvalContext& ctx) const override {
        const SpeciesState& s = ctx.st.species[subject];
        if (s.dirac) throw RuntimeError("KL is undefined on Dirac species");
        const auto& rho = s.field.values;
        double acc = 0.0;
        for (std::size_t c = 0; c < rho.size(); ++c)
            if (rho[c] > 0.0) acc += rho[c] * (std::log(rho[c]) - log_ref_[c]);
        return weight * alpha_ * acc * s.field.grid->cell_volume();
    }

    double diffusion_strength(EvalContext&, int i) const override {
        return i == subject ? std::abs(weight) * alpha_ : 0.0;
    }

private:
    DensityField ref_;
    std::vector<double> log_ref_;
    double alpha_;
};

// ---------------------------------------------------------------------------
// BilinearCoupling: sign * (integral of x^T A y over rho_s x rho_o)
// ---------------------------------------------------------------------------
class BilinearTerm final : public Term {
public:
    BilinearTerm(int subj, int oth, SmallMat A, int sign, double w)
        : other_(oth), A_(std::move(A)), sign_(sign) {
        subject = subj;
        weight = w;
    }
    std::string type_name() const override { return "bilinear"; }
    bool involves(int i) const override { return i == subject || i == other_; }
    int other_species() const override { return other_; }
    int rows() const { return A_.rows; }
    int cols() const { return A_.cols; }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        const SpeciesState& s = ctx.st.species[i];
        const Grid& g = *s.field.grid;
        std::vector<double> c = coeff(ctx, i);
        double x[2] = {0.0, 0.0};
        for (std::size_t cell = 0; cell < out.size(); ++cell) {
            g.cell_center(cell, x);
            out[cell] += dot(x, c.data(), g.dim());
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        std::vector<double> c = coeff(ctx, i);
        return dot(x, c.data(), ctx.st.species[i].dim());
    }

    void add_point_gradient(EvalContext& ctx, int i, const double*, double* g) const override {
        std::vector<double> c = coeff(ctx, i);
        for (std::size_t a = 0; a < c.size(); ++a) g[a] += c[a];
    }

    double value(EvalContext& ctx) const override {
        const auto& ms = ctx.mean(subject);
        const auto& mo = ctx.mean(other_);
        double acc = 0.0;
        for (int r = 0; r < A_.rows; ++r)
            for (int c = 0; c < A_.cols; ++c) acc += ms[r] * A_.at(r, c) * mo[c];
        return weight * sign_ * acc;
    }

    bool second_order_ready() const override { return true; }
    void add_diag_hessian(EvalContext&, int, const double*, SmallMat&) const override {}
    bool has_cross_block(int i, int j) const override {
        return (i == subject && j == other_) || (i == other_ && j == subject);
    }
    void add_cross_hessian(EvalContext&, int i, int j, const double*, const double*,
                           SmallMat& H) const override {
        const double f = weight * sign_;
        if (i == subject && j == other_) {
            for (int r = 0; r < A_.rows; ++r)
                for (int c = 0; c < A_.cols; ++c) H.at(r, c) += f * A_.at(r, c);
        } else if (i == other_ && j == subject) {
            for (int r = 0; r < A_.rows; ++r)
                for (int c = 0; c < A_.cols; ++c) H.at(c, r) += f * A_.at(r, c);
        }
    }

private:
    // gradient coefficient: A E[x_o] when i == subject, A^T E[x_s] when i == other
    std::vector<double> coeff(EvalContext& ctx, int i) const {
        const double f = weight * sign_;
        if (i == subject) {
            const auto& mo = ctx.mean(other_);
            std::vector<double> c(A_.rows, 0.0);
            for (int r = 0; r < A_.rows; ++r)
                for (int k = 0; k < A_.cols; ++k) c[r] += f * A_.at(r, k) * mo[k];
            return c;
        }
        const auto& ms = ctx.mean(subject);
        std::vector<double> c(A_.cols, 0.0);
        for (int k = 0; k < A_.cols; ++k)
            for (int r = 0; r < A_.rows; ++r) c[k] += f * A_.at(r, k) * ms[r];
        return c;
    }

    int other_;
    SmallMat A_;
    int sign_;
};

// ---------------------------------------------------------------------------
// Lifted finite-dimensional quadratic cost f(x) = 1/2 x^T Q x + q^T x
// ---------------------------------------------------------------------------
class QuadraticFormCostTerm final : public Term {
public:
    QuadraticFormCostTerm(int subj, SmallMat Q, std::vector<double> q,
                          std::vector<int> offsets, double w)
        : Q_(std::move(Q)), q_(std::move(q)), off_(std::move(offsets)) {
        subject = subj;
        weight = w;
        // symmetrize so that grad f = Q x + q
        for (int r = 0; r < Q_.rows; ++r)
            for (int c = r + 1; c < Q_.cols; ++c) {
                double s = 0.5 * (Q_.at(r, c) + Q_.at(c, r));
                Q_.at(r, c) = Q_.at(c, r) = s;
            }
    }
    std::string type_name() const override { return "finite_dim_cost"; }
    bool involves(int) const override { return true; }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        const SpeciesState& s = ctx.st.species[i];
        const Grid& g = *s.field.grid;
        const int d = g.dim();
        std::vector<double> lin = linear_coeff(ctx, i);
        const double c0 = const_part(ctx, i);
        double x[2] = {0.0, 0.0};
        for (std::size_t cell = 0; cell < out.size(); ++cell) {
            g.cell_center(cell, x);
            double val = c0 + dot(x, lin.data(), d);
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c)
                    val += 0.5 * x[r] * Q_.at(off_[i] + r, off_[i] + c) * x[c];
            out[cell] += weight * val;
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        const int d = ctx.st.species[i].dim();
        std::vector<double> lin = linear_coeff(ctx, i);
        double val = const_part(ctx, i) + dot(x, lin.data(), d);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c)
                val += 0.5 * x[r] * Q_.at(off_[i] + r, off_[i] + c) * x[c];
        return weight * val;
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        const int d = ctx.st.species[i].dim();
        std::vector<double> lin = linear_coeff(ctx, i);
        for (int r = 0; r < d; ++r) {
            double v = lin[r];
            for (int c = 0; c < d; ++c) v += Q_.at(off_[i] + r, off_[i] + c) * x[c];
            g[r] += weight * v;
        }
    }

    double value(EvalContext& ctx) const override {
        const int n = ctx.st.n();
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            const SmallMat& S = ctx.second_moment_matrix(i);
            const int d = ctx.st.species[i].dim();
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c)
                    acc += 0.5 * Q_.at(off_[i] + r, off_[i] + c) * S.at(r, c);
            const auto& mi = ctx.mean(i);
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const auto& mj = ctx.mean(j);
                const int dj = ctx.st.species[j].dim();
                for (int r = 0; r < d; ++r)
                    for (int c = 0; c < dj; ++c)
                        acc += 0.5 * Q_.at(off_[i] + r, off_[j] + c) * mi[r] * mj[c];
            }
            for (int r = 0; r < d; ++r) acc += q_[off_[i] + r] * mi[r];
        }
        return weight * acc;
    }

    bool second_order_ready() const override { return true; }
    void add_diag_hessian(EvalContext& ctx, int i, const double*, SmallMat& H) const override {
        const int d = ctx.st.species[i].dim();
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) H.at(r, c) += weight * Q_.at(off_[i] + r, off_[i] + c);
    }
    bool has_cross_block(int i, int j) const override { return i != j; }
    void add_cross_hessian(EvalContext& ctx, int i, int j, const double*, const double*,
                           SmallMat& H) const override {
        const int di = ctx.st.species[i].dim();
        const int dj = ctx.st.species[j].dim();
        for (int r = 0; r < di; ++r)
            for (int c = 0; c < dj; ++c) H.at(r, c) += weight * Q_.at(off_[i] + r, off_[j] + c);
    }

private:
    std::vector<double> linear_coeff(EvalContext& ctx, int i) const {
        const int d = ctx.st.species[i].dim();
        std::vector<double> lin(q_.begin() + off_[i], q_.begin() + off_[i] + d);
        for (int j = 0; j < ctx.st.n(); ++j) {
            if (j == i) continue;
            const auto& mj = ctx.mean(j);
            const int dj = ctx.st.species[j].dim();
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < dj; ++c) lin[r] += Q_.at(off_[i] + r, off_[j] + c) * mj[c];
        }
        return lin;
    }
    double const_part(EvalContext& ctx, int i) const {
        double acc = 0.0;
        const int n = ctx.st.n();
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const int dj = ctx.st.species[j].dim();
            const SmallMat& S = ctx.second_moment_matrix(j);
            for (int r = 0; r < dj; ++r)
                for (int c = 0; c < dj; ++c)
                    acc += 0.5 * Q_.at(off_[j] + r, off_[j] + c) * S.at(r, c);
            const auto& mj = ctx.mean(j);
            for (int k = 0; k < n; ++k) {
                if (k == i || k == j) continue;
                const auto& mk = ctx.mean(k);
                const int dk = ctx.st.species[k].dim();
                for (int r = 0; r < dj; ++r)
                    for (int c = 0; c < dk; ++c)
                        acc += 0.5 * Q_.at(off_[j] + r, off_[k] + c) * mj[r] * mk[c];
            }
            for (int r = 0; r < dj; ++r) acc += q_[off_[j] + r] * mj[r];
        }
        return acc;
    }

    SmallMat Q_;
    std::vector<double> q_;
    std::vector<int> off_;
};

// ---------------------------------------------------------------------------
// Multi-learner terms
// ---------------------------------------------------------------------------
class AllocatedUtilityTerm final : public Term {
public:
    AllocatedUtilityTerm(int population, double w) {
        subject = population;
        weight = w;
    }
    std::string type_name() const override { return "allocated_utility"; }

    void add_first_variation(EvalContext& ctx, int i, std::span<double> out) const override {
        if (i != subject) return;
        const auto& alloc = ctx.allocation();
        const int ip = pop_slot(ctx);
        for (std::size_t j = 0; j < alloc.a[ip].size(); ++j) {
            const double f = -weight * alloc.a[ip][j];
            const auto& U = alloc.utility_fields[ip][j];
            for (std::size_t c = 0; c < out.size(); ++c) out[c] += f * U[c];
        }
    }

    double point_first_variation(EvalContext& ctx, int i, const double* x) const override {
        if (i != subject) return 0.0;
        const auto& alloc = ctx.allocation();
        const int ip = pop_slot(ctx);
        const auto& model = *ctx.spec.allocation;
        LoglossKernel u(model.utility_mode, model.steepness);
        double acc = 0.0;
        for (std::size_t j = 0; j < alloc.a[ip].size(); ++j) {
            const auto& h = ctx.st.species[model.providers[j]].point;
            acc += alloc.a[ip][j] * u.value(x, 2, h.data(), 2);
        }
        return -weight * acc;
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        if (i != subject) return;
        const auto& alloc = ctx.allocation();
        const int ip = pop_slot(ctx);
        const auto& model = *ctx.spec.allocation;
        LoglossKernel u(model.utility_mode, model.steepness);
        double buf[2] = {0.0, 0.0};
        for (std::size_t j = 0; j < alloc.a[ip].size(); ++j) {
            const auto& h = ctx.st.species[model.providers[j]].point;
            u.grad_x(x, 2, h.data(), 2, buf);
            for (int a = 0; a < 2; ++a) g[a] += -weight * alloc.a[ip][j] * buf[a];
        }
    }

    double value(EvalContext& ctx) const override {
        // integrate against the current density; the weights a_ij may be a
        // frozen (exogenous) snapshot
        const auto& alloc = ctx.allocation();
        const int ip = pop_slot(ctx);
        const auto& model = *ctx.spec.allocation;
        LoglossKernel u(model.utility_mode, model.steepness);
        const SpeciesState& pop = ctx.st.species[subject];
        double acc = 0.0;
        for (std::size_t j = 0; j < model.providers.size(); ++j) {
            const auto& h = ctx.st.species[model.providers[j]].point;
            double inner = 0.0;
            for_support(pop, [&](const double* x, double m) {
                inner += m * u.value(x, 2, h.data(), 2);
            });
            acc += alloc.a[ip][j] * inner;
        }
        return -weight * acc;
    }

private:
    int pop_slot(EvalContext& ctx) const {
        const auto& pops = ctx.spec.allocation->populations;
        for (std::size_t k = 0; k < pops.size(); ++k)
            if (pops[k] == subject) return static_cast<int>(k);
        throw ConfigError("allocated_utility: species is not a registered population");
    }
};

class AllocatedLossTerm final : public Term {
public:
    AllocatedLossTerm(int provider, double w) {
        subject = provider;
        weight = w;
    }
    std::string type_name() const override { return "allocated_loss"; }

    void add_first_variation(EvalContext&, int, std::span<double>) const override {
        throw RuntimeError("allocated_loss drives a Dirac provider, not a density");
    }

    void add_point_gradient(EvalContext& ctx, int i, const double* x, double* g) const override {
        if (i != subject) return;
        const auto& model = *ctx.spec.allocation;
        const auto& alloc = ctx.allocation();
        const int jq = provider_slot(ctx);
        double buf[2] = {0.0, 0.0};
        for (std::size_t ip = 0; ip < model.populations.size(); ++ip) {
            LoglossKernel l(model.loss_modes[ip], model.steepness);
            const SpeciesState& pop = ctx.st.species[model.populations[ip]];
            const double aiq = alloc.a[ip][jq];
            for_support(pop, [&](const double* xp, double m) {
                l.grad_y(xp, 2, x, 2, buf);
                for (int a = 0; a < 2; ++a) g[a] += weight * aiq * m * buf[a];
            });
        }
    }

    double value(EvalContext& ctx) const override {
        const auto& model = *ctx.spec.allocation;
        const auto& alloc = ctx.allocation();
        const int jq = provider_slot(ctx);
        const auto& h = ctx.st.species[subject].point;
        double acc = 0.0;
        for (std::size_t ip = 0; ip < model.populations.size(); ++ip) {
            LoglossKernel l(model.loss_modes[ip], model.steepness);
            const SpeciesState& pop = ctx.st.species[model.populations[ip]];
            double inner = 0.0;
            for_support(pop, [&](const double* xp, double m) {
                inner += m * l.value(xp, 2, h.data(), 2);
            });
            acc += alloc.a[ip][jq] * inner;
        }
        return weight * acc;
    }

private:
    int provider_slot(EvalContext& ctx) const {
        const auto& prov = ctx.spec.allocation->providers;
        for (std::size_t k = 0; k < prov.size(); ++k)
            if (prov[k] == subject) return static_cast<int>(k);
        throw ConfigError("allocated_loss: species is not a registered provider");
    }
};

}  // namespace

TermPtr make_potential(int subject, RadialProfile prof, double weight) {
    return std::make_unique<PotentialTerm>(subject, prof, weight);
}
TermPtr make_cross_interaction(int subject, int other, std::shared_ptr<const Kernel2> W,
                               double weight) {
    return std::make_unique<CrossInteractionTerm>(subject, other, std::move(W), weight);
}
TermPtr make_self_interaction(int subject, RadialProfile prof, double weight) {
    return std::make_unique<SelfInteractionTerm>(subject, prof, weight);
}
TermPtr make_diffusion(int subject, double m, double alpha, double weight) {
    if (!(m >= 1.0)) throw ConfigError("diffusion: m must satisfy m >= 1");
    if (!(alpha > 0.0)) throw ConfigError("diffusion: alpha must be positive");
    return std::make_unique<DiffusionTerm>(subject, m, alpha, weight);
}
TermPtr make_kl(int subject, DensityField reference, double alpha, double weight) {
    if (!(alpha > 0.0)) throw ConfigError("kl: alpha must be positive");
    return std::make_unique<KLTerm>(subject, std::move(reference), alpha, weight);
}
TermPtr make_bilinear(int subject, int other, SmallMat A, int sign, double weight) {
    if (sign != 1 && sign != -1) throw ConfigError("bilinear: sign must be +1 or -1");
    return std::make_unique<BilinearTerm>(subject, other, std::move(A), sign, weight);
}
TermPtr make_quadratic_form_cost(int subject, SmallMat Q, std::vector<double> q,
                                 std::vector<int> block_offsets, double weight) {
    return std::make_unique<QuadraticFormCostTerm>(subject, std::move(Q), std::move(q),
                                                   std::move(block_offsets), weight);
}
TermPtr make_allocated_utility(int population, double weight) {
    return std::make_unique<AllocatedUtilityTerm>(population, weight);
}
TermPtr make_allocated_loss(int provider, double weight) {
    return std::make_unique<AllocatedLossTerm>(provider, weight);
}

// ---------------------------------------------------------------------------
// Softmax allocation
// ---------------------------------------------------------------------------
std::vector<std::vector<double>> allocation_softmax(
    const std::vector<std::vector<double>>& expected_utility, double eta) {
    if (eta < 0.0) throw ConfigError("allocation: eta must be nonnegative");
    std::vector<std::vector<double>> a(expected_utility.size());
    for (std::size_t i = 0; i < expected_utility.size(); ++i) {
        const auto& row = expected_utility[i];
        double mx = -1e300;
        for (double u : row) mx = std::max(mx, eta * u);
        double z = 0.0;
        a[i].resize(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) {
            a[i][j] = std::exp(eta * row[j] - mx);
            z += a[i][j];
        }
        for (double& v : a[i]) v /= z;
    }
    return a;
}

// ---------------------------------------------------------------------------
// EvalContext caches
// ---------------------------------------------------------------------------
const std::vector<double>& EvalContext::mean(int i) {
    if (means_.empty()) {
        means_.resize(st.n());
        mean_ready_.assign(st.n(), 0);
    }
    if (!mean_ready_[i]) {
        const SpeciesState& s = st.species[i];
        std::vector<double> m(s.dim(), 0.0);
        for_support(s, [&](const double* x, double w) {
            for (int a = 0; a < s.dim(); ++a) m[a] += w * x[a];
        });
        means_[i] = std::move(m);
        mean_ready_[i] = 1;
    }
    return means_[i];
}

const SmallMat& EvalContext::second_moment_matrix(int i) {
    if (smm_.empty()) {
        smm_.resize(st.n());
        smm_ready_.assign(st.n(), 0);
    }
    if (!smm_ready_[i]) {
        const SpeciesState& s = st.species[i];
        const int d = s.dim();
        SmallMat S = SmallMat::zero(d, d);
        for_support(s, [&](const double* x, double w) {
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c) S.at(r, c) += w * x[r] * x[c];
        });
        smm_[i] = std::move(S);
        smm_ready_[i] = 1;
    }
    return smm_[i];
}

const EvalContext::Allocation& EvalContext::allocation() {
    if (alloc_) return *alloc_;
    if (!spec.allocation)
        throw ConfigError("no allocation model configured");
    const AllocationModel& model = *spec.allocation;
    Allocation out;
    const std::size_t np = model.populations.size();
    const std::size_t mp = model.providers.size();
    out.utility_fields.assign(np, {});
    out.expected_utility.assign(np, std::vector<double>(mp, 0.0));
    LoglossKernel u(model.utility_mode, model.steepness);
    for (std::size_t ip = 0; ip < np; ++ip) {
        const SpeciesState& pop = st.species[model.populations[ip]];
        out.utility_fields[ip].assign(mp, {});
        for (std::size_t j = 0; j < mp; ++j) {
            const SpeciesState& prov = st.species[model.providers[j]];
            if (!prov.dirac)
                throw RuntimeError("allocation providers must be Dirac species");
            if (pop.dirac) {
                double v = u.value(pop.point.data(), 2, prov.point.data(), 2);
                out.utility_fields[ip][j] = {v};
                out.expected_utility[ip][j] = v;
            } else {
                const Grid& g = *pop.field.grid;
                auto& U = out.utility_fields[ip][j];
                U.resize(g.size());
                double x[2] = {0.0, 0.0}; double acc = 0.0;
                for (std::size_t c = 0; c < g.size(); ++c) {
                    g.cell_center(c, x);
                    U[c] = u.value(x, 2, prov.point.data(), 2);
                    acc += U[c] * pop.field.values[c];
                }
                out.expected_utility[ip][j] = acc * g.cell_volume();
            }
        }
    }
    out.a = allocation_softmax(out.expected_utility, model.eta);
    alloc_ = std::move(out);
    return *alloc_;
}

// ---------------------------------------------------------------------------
// EnergySpec
// ---------------------------------------------------------------------------
void EnergySpec::validate() const {
    const int N = n();
    for (int i = 0; i < N; ++i) {
        for (const auto& t : species[i].terms) {
            if (t->subject < 0 || t->subject >= N)
                throw ConfigError("term subject out of range");
            int oth = t->other_species();
            if (oth != -1 && (oth == t->subject || oth < 0 || oth >= N))
                throw ConfigError("coupling target must be a distinct species in range");
            if (auto* bt = dynamic_cast<const BilinearTerm*>(t.get())) {
                if (bt->rows() != species[bt->subject].dim ||
                    bt->cols() != species[bt->other_species()].dim)
                    throw ConfigError(
                        "bilinear matrix must be d_subject x d_other for species " +
                        std::to_string(i));
            }
            if (t->is_diffusive()) {
                if (species[t->subject].dirac)
                    throw ConfigError("Dirac species cannot carry diffusion or KL terms");
                if (t->subject == i && !(t->weight > 0.0))
                    throw ConfigError("flow-driving diffusion/KL terms need positive weight");
            }
        }
    }
    if (allocation) {
        for (int p : allocation->populations)
            if (p < 0 || p >= N) throw ConfigError("allocation population index out of range");
        for (int q : allocation->providers) {
            if (q < 0 || q >= N) throw ConfigError("allocation provider index out of range");
            if (!species[q].dirac)
                throw ConfigError("allocation providers must be Dirac species");
        }
        if (allocation->loss_modes.size() != allocation->populations.size())
            throw ConfigError("allocation: one loss mode per population required");
    }
}

void EnergySpec::prepare(const SystemState& tmpl) {
    for (auto& sp : species)
        for (auto& t : sp.terms) t->prepare(*this, tmpl);
}

void EnergySpec::first_variation_into(EvalContext& ctx, int i, std::vector<double>& out) const {
    const SpeciesState& s = ctx.st.species[i];
    if (s.dirac)
        throw ConfigError("first_variation: species " + std::to_string(i) + " is a Dirac");
    out.assign(s.field.grid->size(), 0.0);
    for (const auto& t : species[i].terms)
        if (t->involves(i)) t->add_first_variation(ctx, i, out);
}

std::vector<double> EnergySpec::first_variation(const SystemState& st, int i) const {
    EvalContext ctx(*this, st);
    std::vector<double> out;
    first_variation_into(ctx, i, out);
    return out;
}

std::vector<double> EnergySpec::dirac_velocity(const SystemState& st, int i) const {
    EvalContext ctx(*this, st);
    const SpeciesState& s = st.species[i];
    std::vector<double> g(s.dim(), 0.0);
    for (const auto& t : species[i].terms)
        if (t->involves(i)) t->add_point_gradient(ctx, i, s.point.data(), g.data());
    for (double& v : g) v = -v;
    return g;
}

Velocities EnergySpec::assemble_velocity(const SystemState& st) const {
    EvalContext ctx(*this, st);
    Velocities out;
    out.v.resize(st.n());
    std::vector<double> fv;
    for (int i = 0; i < st.n(); ++i) {
        const SpeciesState& s = st.species[i];
        SpeciesVelocity& v = out.v[i];
        if (s.dirac) {
            v.dirac = true;
            v.vec.assign(s.dim(), 0.0);
            for (const auto& t : species[i].terms)
                if (t->involves(i)) t->add_point_gradient(ctx, i, s.point.data(), v.vec.data());
            for (double& c : v.vec) c = -c;
        } else {
            v.dirac = false;
            first_variation_into(ctx, i, fv);
            v.field.grid = s.field.grid;
            gradient_into(fv, *s.field.grid, v.field);
            for (int a = 0; a < s.field.grid->dim(); ++a)
                for (double& c : v.field.comp[a]) c = -c;
        }
    }
    return out;
}

double EnergySpec::energy_value(const SystemState& st, int i) const {
    EvalContext ctx(*this, st);
    return energy_value_ctx(ctx, i);
}

double EnergySpec::energy_value_ctx(EvalContext& ctx, int i) const {
    double acc = 0.0;
    for (const auto& t : species[i].terms) acc += t->value(ctx);
    return acc;
}

std::vector<std::vector<double>> EnergySpec::allocation_weights(const SystemState& st) const {
    EvalContext ctx(*this, st);
    return ctx.allocation().a;
}

double EnergySpec::diffusion_strength(const SystemState& st, int i) const {
    EvalContext ctx(*this, st);
    double acc = 0.0;
    for (const auto& t : species[i].terms) acc += t->diffusion_strength(ctx, i);
    return acc;
}

bool EnergySpec::has_diffusion_like_terms() const {
    for (const auto& sp : species)
        for (const auto& t : sp.terms)
            if (t->is_diffusive()) return true;
    return false;
}

}  // namespace monoflow
