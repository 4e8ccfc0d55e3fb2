#include "monoflow/transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <queue>

namespace monoflow {

double DiscreteMeasure::total_mass() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
}

void DiscreteMeasure::validate(double tol) const {
    if (points.size() != weights.size() * static_cast<std::size_t>(dim))
        throw ConfigError("measure: point array size mismatch");
    if (weights.empty()) throw ConfigError("measure: empty support");
    for (double w : weights)
        if (!(w > 0.0)) throw ConfigError("measure: weights must be positive");
    if (std::abs(total_mass() - 1.0) > tol)
        throw ConfigError("measure: weights must sum to 1");
}

double TransportPlan::quadratic_cost() const {
    double c = 0.0;
    for (const auto& e : entries) {
        const double* x = source.point(e.row);
        const double* y = target.point(e.col);
        double d2 = 0.0;
        for (int a = 0; a < source.dim; ++a) d2 += sq(x[a] - y[a]);
        c += e.mass * d2;
    }
    return c;
}

double TransportPlan::marginal_error() const {
    std::vector<double> rs(source.size(), 0.0), cs(target.size(), 0.0);
    for (const auto& e : entries) {
        rs[e.row] += e.mass;
        cs[e.col] += e.mass;
    }
    double err = 0.0;
    for (std::size_t k = 0; k < rs.size(); ++k)
        err = std::max(err, std::abs(rs[k] - source.weights[k]));
    for (std::size_t l = 0; l < cs.size(); ++l)
        err = std::max(err, std::abs(cs[l] - target.weights[l]));
    return err;
}

namespace {

// Network simplex for the dense bipartite transportation problem with
// quadratic ground cost. Nodes 0..n-1 are sources, n..n+m-1 sinks. The basis
// is a spanning tree started from the northwest-corner staircase; entering
// arcs are found by block search over the dense arc set, the leaving arc by
// the usual min-ratio walk to the cycle apex.
class TransportSimplex {
public:
    TransportSimplex(const DiscreteMeasure& mu, const DiscreteMeasure& nu)
        : mu_(mu), nu_(nu), n_(static_cast<int>(mu.size())),
          m_(static_cast<int>(nu.size())), nodes_(n_ + m_) {}

    void solve() {
        build_initial_basis();
        rebuild_tree();

        double max_c = 0.0;
        for (int k = 0; k < n_; ++k)
            for (int l = 0; l < m_; ++l) max_c = std::max(max_c, cost(k, l));
        tol_ = 1e-12 * (1.0 + max_c);

        const long long num_arcs = static_cast<long long>(n_) * m_;
        const long long block =
            std::max<long long>(64, static_cast<long long>(std::sqrt(static_cast<double>(num_arcs))));
        long long pos = 0;
        const long long max_pivots = 400LL * (n_ + m_) + 200000LL;
        long long pivots = 0;

        while (true) {
            // entering arc: most negative reduced cost within scanned blocks
            int best_k = -1, best_l = -1;
            double best_r = -tol_;
            long long scanned = 0;
            while (scanned < num_arcs) {
                long long stop = std::min(num_arcs, scanned + block);
                for (; scanned < stop; ++scanned) {
                    long long a = pos + scanned;
                    if (a >= num_arcs) a -= num_arcs;
                    int k = static_cast<int>(a / m_);
                    int l = static_cast<int>(a % m_);
                    double r = cost(k, l) + pi_[k] - pi_[n_ + l];
                    if (r < best_r) {
                        best_r = r;
                        best_k = k;
                        best_l = l;
                    }
                }
                if (best_k >= 0) break;
            }
            if (best_k < 0) break;  // optimal
            pos = (static_cast<long long>(best_k) * m_ + best_l + 1) % num_arcs;

            pivot(best_k, n_ + best_l);
            if (++pivots > max_pivots)
                throw RuntimeError("w2_exact: pivot limit exceeded (degenerate cycling?)");
        }
    }

    double optimal_cost() const {
        double c = 0.0;
        for (const auto& e : edges_)
            if (e.alive && e.flow > 0.0) c += e.flow * cost(e.src, e.snk - n_);
        return c;
    }

    std::vector<PlanEntry> plan_entries() const {
        std::vector<PlanEntry> out;
        for (const auto& e : edges_)
            if (e.alive && e.flow > 0.0) out.push_back({e.src, e.snk - n_, e.flow});
        std::sort(out.begin(), out.end(), [](const PlanEntry& a, const PlanEntry& b) {
            return a.row != b.row ? a.row < b.row : a.col < b.col;
        });
        return out;
    }

private:
    struct Edge {
        int src, snk;  // src in [0,n), snk in [n,n+m)
        double flow = 0.0;
        bool alive = true;
    };

    double cost(int k, int l) const {
        const double* x = mu_.point(k);
        const double* y = nu_.point(l);
        double d2 = 0.0;
        for (int a = 0; a < mu_.dim; ++a) d2 += sq(x[a] - y[a]);
        return d2;
    }

    void add_edge(int k, int l, double flow) {
        int id = static_cast<int>(edges_.size());
        edges_.push_back({k, n_ + l, flow, true});
        adj_[k].push_back(id);
        adj_[n_ + l].push_back(id);
    }

    void remove_edge(int id) {
        edges_[id].alive = false;
        for (int v : {edges_[id].src, edges_[id].snk}) {
            auto& a = adj_[v];
            a.erase(std::find(a.begin(), a.end(), id));
        }
    }

    void build_initial_basis() {
        adj_.assign(nodes_, {});
        edges_.clear();
        edges_.reserve(nodes_);
        std::vector<double> s(mu_.weights), d(nu_.weights);
        int k = 0, l = 0;
        while (true) {
            double f = std::min(s[k], d[l]);
            add_edge(k, l, f);
            s[k] -= f;
            d[l] -= f;
            // advance one side only so the staircase stays a spanning tree;
            // the edge guards keep it complete despite rounding
            if (k == n_ - 1 && l == m_ - 1) break;
            bool advance_k;
            if (k == n_ - 1)
                advance_k = false;
            else if (l == m_ - 1)
                advance_k = true;
            else
                advance_k = (s[k] <= d[l]);
            if (advance_k)
                ++k;
            else
                ++l;
        }
    }

    // BFS from node 0 rebuilding parent, depth, pred edge and potentials.
    void rebuild_tree() {
        parent_.assign(nodes_, -1);
        pred_edge_.assign(nodes_, -1);
        depth_.assign(nodes_, 0);
        pi_.assign(nodes_, 0.0);
        std::vector<int> stack{0};
        std::vector<char> seen(nodes_, 0);
        seen[0] = 1;
        while (!stack.empty()) {
            int v = stack.back();
            stack.pop_back();
            for (int id : adj_[v]) {
                const Edge& e = edges_[id];
                int w = (e.src == v) ? e.snk : e.src;
                if (seen[w]) continue;
                seen[w] = 1;
                parent_[w] = v;
                pred_edge_[w] = id;
                depth_[w] = depth_[v] + 1;
                double c = cost(e.src, e.snk - n_);
                // reduced cost c + pi[src] - pi[snk] = 0 on tree arcs
                pi_[w] = (e.src == v) ? pi_[v] + c : pi_[v] - c;
                stack.push_back(w);
            }
        }
    }

    // Push flow around the cycle closed by arc (u -> v), both node ids.
    void pivot(int u, int v) {
        int a = u, b = v;
        while (depth_[a] > depth_[b]) a = parent_[a];
        while (depth_[b] > depth_[a]) b = parent_[b];
        while (a != b) {
            a = parent_[a];
            b = parent_[b];
        }
        const int apex = a;

        // Leaving arc: min flow among arcs traversed against their direction.
        // Cycle orientation: u -(entering)-> v -> ... -> apex -> ... -> u.
        double theta = std::numeric_limits<double>::infinity();
        int leave = -1;       // node whose pred edge leaves
        bool leave_on_u_side = false;
        for (int q = u; q != apex; q = parent_[q]) {
            const Edge& e = edges_[pred_edge_[q]];
            // traversal on this segment runs parent -> q; arc direction
            // q -> parent means it opposes the cycle.
            bool opposes = (e.src == q);
            if (opposes && e.flow < theta) {
                theta = e.flow;
                leave = q;
                leave_on_u_side = true;
            }
        }
        for (int q = v; q != apex; q = parent_[q]) {
            const Edge& e = edges_[pred_edge_[q]];
            bool opposes = (e.snk == q);  // traversal q -> parent, arc parent <- q? see below
            // On the v-side, traversal runs q -> parent; the arc opposes the
            // cycle when directed parent -> q, i.e. when q is the sink end.
            if (opposes && e.flow <= theta) {
                theta = e.flow;
                leave = q;
                leave_on_u_side = false;
            }
        }
        (void)leave_on_u_side;
        if (leave < 0)
            throw RuntimeError("w2_exact: unbounded pivot (internal error)");

        // apply flow change
        for (int q = u; q != apex; q = parent_[q]) {
            Edge& e = edges_[pred_edge_[q]];
            e.flow += (e.src == q) ? -theta : theta;
        }
        for (int q = v; q != apex; q = parent_[q]) {
            Edge& e = edges_[pred_edge_[q]];
            e.flow += (e.snk == q) ? -theta : theta;
        }

        int leaving_edge = pred_edge_[leave];
        remove_edge(leaving_edge);
        add_edge(u, v - n_, theta);
        rebuild_tree();
    }

    const DiscreteMeasure& mu_;
    const DiscreteMeasure& nu_;
    int n_, m_, nodes_;
    double tol_ = 1e-12;
    std::vector<Edge> edges_;
    std::vector<std::vector<int>> adj_;
    std::vector<int> parent_, pred_edge_, depth_;
    std::vector<double> pi_;
};

}  // namespace

W2Result w2_exact(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    mu.validate();
    nu.validate();
    if (mu.dim != nu.dim)
        throw ConfigError("w2_exact: ambient dimension mismatch");
    if (mu.size() > kMaxSupport || nu.size() > kMaxSupport)
        throw ConfigError(
            "w2_exact: support exceeds " + std::to_string(kMaxSupport) +
            " points; coarsen the measures first");

    TransportSimplex solver(mu, nu);
    solver.solve();

    W2Result res;
    res.plan.source = mu;
    res.plan.target = nu;
    res.plan.entries = solver.plan_entries();
    res.plan.optimal = true;
    res.distance = std::sqrt(std::max(0.0, solver.optimal_cost()));
    return res;
}

DiscreteMeasure embed(const DensityField& f) {
    const Grid& g = *f.grid;
    DiscreteMeasure m;
    m.dim = g.dim();
    const double vol = g.cell_volume();
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g.size(); ++c) {
        double w = f.values[c] * vol;
        if (w <= 0.0) continue;
        g.cell_center(c, x);
        m.push(x, w);
    }
    return m;
}

DiscreteMeasure coarsen(const DensityField& f, std::size_t max_support) {
    if (max_support < 1) throw ConfigError("coarsen: max_support must be >= 1");
    const Grid& g = *f.grid;
    std::size_t positive = 0;
    for (double v : f.values)
        if (v > 0.0) ++positive;
    if (positive <= max_support) return embed(f);

    int side = 1;
    auto blocks_for = [&](int s) {
        std::size_t b = 1;
        for (int a = 0; a < g.dim(); ++a)
            b *= static_cast<std::size_t>((g.cells(a) + s - 1) / s);
        return b;
    };
    while (blocks_for(side) > max_support) ++side;

    const int bx = (g.cells(0) + side - 1) / side;
    const int by = g.dim() == 2 ? (g.cells(1) + side - 1) / side : 1;
    std::vector<double> mass(static_cast<std::size_t>(bx) * by, 0.0);
    std::vector<double> cx(mass.size(), 0.0), cy(mass.size(), 0.0);

    const double vol = g.cell_volume();
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g.size(); ++c) {
        double w = f.values[c] * vol;
        if (w <= 0.0) continue;
        int ix, iy;
        g.coords(c, ix, iy);
        std::size_t b = static_cast<std::size_t>(iy / side) * bx + (ix / side);
        g.cell_center(c, x);
        mass[b] += w;
        cx[b] += w * x[0];
        if (g.dim() == 2) cy[b] += w * x[1];
    }

    DiscreteMeasure m;
    m.dim = g.dim();
    for (std::size_t b = 0; b < mass.size(); ++b) {
        if (mass[b] <= 0.0) continue;
        double p[2] = {cx[b] / mass[b], g.dim() == 2 ? cy[b] / mass[b] : 0.0};
        m.push(p, mass[b]);
    }
    return m;
}

DiscreteMeasure measure_of_species(const SpeciesState& s, std::size_t max_support) {
    if (s.dirac) {
        DiscreteMeasure m;
        m.dim = static_cast<int>(s.point.size());
        m.push(s.point.data(), 1.0);
        return m;
    }
    return coarsen(s.field, max_support);
}

static double sqnorm_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += sq(a[k] - b[k]);
    return s;
}

double joint_w2(const SystemState& a, const SystemState& b, std::size_t coarsen_to) {
    if (a.n() != b.n())
        throw ConfigError("joint_w2: species count mismatch");
    double total = 0.0;
    for (int i = 0; i < a.n(); ++i) {
        const SpeciesState& sa = a.species[i];
        const SpeciesState& sb = b.species[i];
        if (sa.dim() != sb.dim())
            throw ConfigError("joint_w2: dimension mismatch for species " + std::to_string(i));
        if (sa.dirac && sb.dirac) {
            total += sqnorm_diff(sa.point, sb.point);
        } else {
            DiscreteMeasure ma = measure_of_species(sa, coarsen_to);
            DiscreteMeasure mb = measure_of_species(sb, coarsen_to);
            double d = w2_exact(ma, mb).distance;
            total += d * d;
        }
    }
    return std::sqrt(total);
}

DiscreteMeasure displacement_interpolant(const TransportPlan& plan, double s) {
    if (!(s >= 0.0 && s <= 1.0))
        throw ConfigError("displacement_interpolant: s must lie in [0,1]");
    if (s == 0.0) return plan.source;
    if (s == 1.0) return plan.target;
    DiscreteMeasure out;
    out.dim = plan.source.dim;
    double p[2] = {0.0, 0.0};
    for (const auto& e : plan.entries) {
        if (e.mass <= 0.0) continue;
        const double* x = plan.source.point(e.row);
        const double* y = plan.target.point(e.col);
        for (int a = 0; a < out.dim; ++a) p[a] = (1.0 - s) * x[a] + s * y[a];
        out.push(p, e.mass);
    }
    return out;
}

TransportPlan product_plan(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    mu.validate();
    nu.validate();
    TransportPlan plan;
    plan.source = mu;
    plan.target = nu;
    plan.optimal = false;
    plan.entries.reserve(mu.size() * nu.size());
    for (std::size_t k = 0; k < mu.size(); ++k)
        for (std::size_t l = 0; l < nu.size(); ++l)
            plan.entries.push_back({static_cast<int>(k), static_cast<int>(l),
                                    mu.weights[k] * nu.weights[l]});
    return plan;
}

}  // namespace monoflow
