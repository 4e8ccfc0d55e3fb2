#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace monoflow::oracle {

namespace {

constexpr double kTol = 1e-11;

// One simplex phase on the tableau. T has rows constraints + final objective
// row; basis[i] is the variable owning row i. Bland's rule throughout.
void run_phase(std::vector<std::vector<double>>& T, std::vector<int>& basis,
               int num_vars) {
    const int m = static_cast<int>(T.size()) - 1;
    const int obj = m;
    const int rhs = static_cast<int>(T[0].size()) - 1;
    for (long long iter = 0;; ++iter) {
        if (iter > 200000) throw RuntimeError("oracle LP: iteration limit");
        int enter = -1;
        for (int j = 0; j < num_vars; ++j) {
            if (T[obj][j] < -kTol) {
                enter = j;
                break;  // Bland: smallest index
            }
        }
        if (enter < 0) return;
        int leave = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < m; ++i) {
            if (T[i][enter] > kTol) {
                double ratio = T[i][rhs] / T[i][enter];
                if (ratio < best - 1e-15 ||
                    (ratio < best + 1e-15 && (leave < 0 || basis[i] < basis[leave]))) {
                    best = ratio;
                    leave = i;
                }
            }
        }
        if (leave < 0) throw RuntimeError("oracle LP: unbounded");
        // pivot
        double p = T[leave][enter];
        for (double& v : T[leave]) v /= p;
        for (int i = 0; i <= m; ++i) {
            if (i == leave) continue;
            double f = T[i][enter];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < T[i].size(); ++j) T[i][j] -= f * T[leave][j];
        }
        basis[leave] = enter;
    }
}

}  // namespace

double lp_solve_equality(std::vector<std::vector<double>> A, std::vector<double> b,
                         std::vector<double> c) {
    const int m = static_cast<int>(A.size());
    const int n = static_cast<int>(c.size());
    for (int i = 0; i < m; ++i) {
        if (b[i] < 0.0) {
            b[i] = -b[i];
            for (double& v : A[i]) v = -v;
        }
    }
    // tableau over n original + m artificial variables
    const int total = n + m;
    std::vector<std::vector<double>> T(m + 1, std::vector<double>(total + 1, 0.0));
    std::vector<int> basis(m);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) T[i][j] = A[i][j];
        T[i][n + i] = 1.0;
        T[i][total] = b[i];
        basis[i] = n + i;
    }
    // phase 1 objective: minimize sum of artificials
    for (int j = 0; j < total + 1; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += T[i][j];
        T[m][j] = (j >= n && j < total) ? 0.0 : -s;
    }
    run_phase(T, basis, total);
    double infeas = -T[m][total];
    if (std::abs(infeas) > 1e-7) throw RuntimeError("oracle LP: infeasible");

    // force remaining artificial basis columns out (degenerate rows)
    for (int i = 0; i < m; ++i) {
        if (basis[i] < n) continue;
        int enter = -1;
        for (int j = 0; j < n; ++j)
            if (std::abs(T[i][j]) > 1e-9) {
                enter = j;
                break;
            }
        if (enter < 0) continue;  // redundant row, leave in place with zero value
        double p = T[i][enter];
        for (double& v : T[i]) v /= p;
        for (int r = 0; r <= m; ++r) {
            if (r == i) continue;
            double f = T[r][enter];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < T[r].size(); ++j) T[r][j] -= f * T[i][j];
        }
        basis[i] = enter;
    }

    // phase 2 objective
    for (int j = 0; j <= total; ++j) T[m][j] = 0.0;
    for (int j = 0; j < n; ++j) T[m][j] = c[j];
    // block artificials from re-entering
    for (int j = n; j < total; ++j) T[m][j] = 1e30;
    for (int i = 0; i < m; ++i) {
        if (basis[i] >= n) continue;
        double f = T[m][basis[i]];
        if (f == 0.0) continue;
        for (int j = 0; j <= total; ++j) T[m][j] -= f * T[i][j];
    }
    run_phase(T, basis, n);  // only original variables may enter

    double value = 0.0;
    for (int i = 0; i < m; ++i)
        if (basis[i] < n) value += c[basis[i]] * T[i][total];
    return value;
}

double transport_cost_lp(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    const int n = static_cast<int>(mu.size());
    const int m = static_cast<int>(nu.size());
    const int vars = n * m;
    std::vector<std::vector<double>> A;
    std::vector<double> b;
    for (int k = 0; k < n; ++k) {
        std::vector<double> row(vars, 0.0);
        for (int l = 0; l < m; ++l) row[k * m + l] = 1.0;
        A.push_back(std::move(row));
        b.push_back(mu.weights[k]);
    }
    for (int l = 0; l < m - 1; ++l) {  // last column constraint is redundant
        std::vector<double> row(vars, 0.0);
        for (int k = 0; k < n; ++k) row[k * m + l] = 1.0;
        A.push_back(std::move(row));
        b.push_back(nu.weights[l]);
    }
    std::vector<double> c(vars);
    for (int k = 0; k < n; ++k)
        for (int l = 0; l < m; ++l) {
            double d2 = 0.0;
            for (int a = 0; a < mu.dim; ++a)
                d2 += sq(mu.point(k)[a] - nu.point(l)[a]);
            c[k * m + l] = d2;
        }
    return lp_solve_equality(std::move(A), std::move(b), std::move(c));
}

double morse_bound_bruteforce(double cr, double lr, double ca, double la, double rmax,
                              long long samples) {
    double m1 = std::numeric_limits<double>::infinity();
    double m2 = std::numeric_limits<double>::infinity();
    for (long long s = 0; s < samples; ++s) {
        double r = rmax * static_cast<double>(s) / static_cast<double>(samples - 1);
        double r2 = r * r;
        double er = std::exp(-r2 / lr), ea = std::exp(-r2 / la);
        m1 = std::min(m1, 2.0 * (-cr / lr * er + ca / la * ea));
        m2 = std::min(m2, 4.0 * r2 * (cr / (lr * lr) * er - ca / (la * la) * ea));
    }
    return m1 + std::min(m2, 0.0);
}

double power_law_bound_bruteforce(double a, double b, double rmax, long long samples) {
    double lo = std::numeric_limits<double>::infinity();
    for (long long s = 0; s < samples; ++s) {
        double r = rmax * static_cast<double>(s) / static_cast<double>(samples - 1);
        double tang = std::pow(r, a - 2.0) - std::pow(r, b - 2.0);
        if (a == 2.0) tang = 1.0 - std::pow(r, b - 2.0);
        if (b == 2.0) tang = std::pow(r, a - 2.0) - 1.0;
        double ra = (a == 2.0) ? 0.0 : (a - 2.0) * std::pow(r, a - 2.0);
        double rb = (b == 2.0) ? 0.0 : (b - 2.0) * std::pow(r, b - 2.0);
        double rad = tang + ra - rb;
        lo = std::min(lo, std::min(tang, rad));
    }
    return lo;
}

DiscreteMeasure random_measure(Rng& rng, int n, int dim) {
    DiscreteMeasure m;
    m.dim = dim;
    double total = 0.0;
    for (int k = 0; k < n; ++k) {
        for (int a = 0; a < dim; ++a)
            m.points.push_back(rng.uniform(-1.0, 1.0));
        double w = 0.05 + rng.uniform();
        m.weights.push_back(w);
        total += w;
    }
    for (double& w : m.weights) w /= total;
    return m;
}

}  // namespace monoflow::oracle

namespace monoflow::oracle {

double quantile_cost_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    if (mu.dim != 1 || nu.dim != 1)
        throw ConfigError("quantile oracle: 1d measures only");
    std::vector<std::pair<double, double>> a, b;
    for (std::size_t k = 0; k < mu.size(); ++k)
        a.push_back({mu.point(k)[0], mu.weights[k]});
    for (std::size_t k = 0; k < nu.size(); ++k)
        b.push_back({nu.point(k)[0], nu.weights[k]});
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double cost = 0.0, wa = a[0].second, wb = b[0].second;
    while (i < a.size() && j < b.size()) {
        double m = std::min(wa, wb);
        cost += m * sq(a[i].first - b[j].first);
        wa -= m;
        wb -= m;
        if (wa <= 1e-15 && ++i < a.size()) wa = a[i].second;
        if (wb <= 1e-15 && ++j < b.size()) wb = b[j].second;
    }
    return cost;
}

}  // namespace monoflow::oracle
