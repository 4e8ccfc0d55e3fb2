#include "monoflow/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace monoflow {

using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream out(path, mode);
    if (!out) throw RuntimeError("cannot open output file '" + path + "'");
    return out;
}

}  // namespace

void write_trajectory_csv(const std::string& path, const Trajectory& traj, int n_species,
                          bool with_w2) {
    auto out = open_out(path);
    out << "t";
    for (int i = 1; i <= n_species; ++i) out << ",F_" << i;
    out << ",D,M,boundary_mass";
    if (with_w2) out << ",w2_ref";
    out << "\n";
    for (const auto& s : traj.samples) {
        out << fmt(s.t);
        for (double e : s.energies) out << "," << fmt(e);
        out << "," << fmt(s.D) << "," << fmt(s.M) << "," << fmt(s.boundary_mass);
        if (with_w2) out << "," << fmt(s.w2_ref.value_or(0.0));
        out << "\n";
    }
}

void write_allocations_csv(const std::string& path, const Trajectory& traj,
                           int populations, int providers) {
    auto out = open_out(path);
    out << "t";
    for (int i = 1; i <= populations; ++i)
        for (int j = 1; j <= providers; ++j) out << ",a_" << i << j;
    out << "\n";
    for (const auto& s : traj.samples) {
        if (s.allocation.empty()) continue;
        out << fmt(s.t);
        for (double a : s.allocation) out << "," << fmt(a);
        out << "\n";
    }
}

void write_density_csv(const std::string& path, const DensityField& f) {
    auto out = open_out(path);
    const Grid& g = *f.grid;
    out << (g.dim() == 1 ? "x,value" : "x,y,value") << "\n";
    double x[2] = {0.0, 0.0};
    for (std::size_t c = 0; c < g.size(); ++c) {
        g.cell_center(c, x);
        out << fmt(x[0]);
        if (g.dim() == 2) out << "," << fmt(x[1]);
        out << "," << fmt(f.values[c]) << "\n";
    }
}

void write_density_raw(const std::string& base_path, const DensityField& f) {
    static_assert(sizeof(double) == 8);
    {
        auto out = open_out(base_path + ".bin", std::ios::binary);
        // this toolchain is little-endian; recorded in the sidecar
        out.write(reinterpret_cast<const char*>(f.values.data()),
                  static_cast<std::streamsize>(f.values.size() * sizeof(double)));
    }
    const Grid& g = *f.grid;
    json side;
    side["dtype"] = "float64";
    side["byte_order"] = "little";
    side["count"] = f.values.size();
    side["grid"] = {{"dim", g.dim()},
                    {"lower", g.spec().lower},
                    {"upper", g.spec().upper},
                    {"cells", g.spec().cells}};
    write_json_file(base_path + ".json", side);
}

DensityField read_density_raw(const std::string& base_path) {
    std::ifstream meta(base_path + ".json");
    if (!meta) throw RuntimeError("missing sidecar '" + base_path + ".json'");
    json side;
    meta >> side;
    GridSpec gs;
    gs.dim = side.at("grid").at("dim").get<int>();
    gs.lower = side.at("grid").at("lower").get<std::vector<double>>();
    gs.upper = side.at("grid").at("upper").get<std::vector<double>>();
    gs.cells = side.at("grid").at("cells").get<std::vector<int>>();
    DensityField f;
    f.grid = build_grid(std::move(gs));
    f.values.resize(side.at("count").get<std::size_t>());
    std::ifstream in(base_path + ".bin", std::ios::binary);
    if (!in) throw RuntimeError("missing data file '" + base_path + ".bin'");
    in.read(reinterpret_cast<char*>(f.values.data()),
            static_cast<std::streamsize>(f.values.size() * sizeof(double)));
    if (!in) throw RuntimeError("short read from '" + base_path + ".bin'");
    return f;
}

void write_plan_csv(const std::string& path, const TransportPlan& plan) {
    auto out = open_out(path);
    out << "source,target,mass\n";
    for (const auto& e : plan.entries)
        out << e.row << "," << e.col << "," << fmt(e.mass) << "\n";
}

void write_text_file(const std::string& path, const std::string& content) {
    auto out = open_out(path);
    out << content;
}

void write_json_file(const std::string& path, const json& doc) {
    auto out = open_out(path);
    out << doc.dump(2) << "\n";
}

json report_to_json(const MonotonicityReport& rep) {
    json pairs = json::array();
    for (const auto& p : rep.pairs)
        pairs.push_back({{"seed", p.seed},
                         {"dissipation", p.dissipation},
                         {"squared_distance", p.sqdist},
                         {"ratio", p.ratio}});
    json out = {
        {"lambda_hat", rep.lambda_hat},
        {"num_pairs", rep.num_pairs},
        {"skipped", rep.skipped},
        {"caveat", rep.single_plan_caveat ? json("single-optimal-plan check")
                                          : json(nullptr)},
        {"worst_pair",
         {{"seed", rep.worst.seed}, {"description", rep.worst_description}}},
        {"pairs", pairs},
    };
    if (rep.claim) {
        out["claim"] = *rep.claim;
        out["violation"] = rep.violation;
    }
    return out;
}

void write_svg_plot(const std::string& path, const std::vector<SvgSeries>& series,
                    bool log_y) {
    const int W = 720, H = 480, ML = 64, MR = 16, MT = 16, MB = 40;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series) {
        for (std::size_t k = 0; k < s.x.size(); ++k) {
            double y = s.y[k];
            if (log_y) {
                if (!(y > 0.0)) continue;
                y = std::log10(y);
            }
            xmin = std::min(xmin, s.x[k]);
            xmax = std::max(xmax, s.x[k]);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (xmax <= xmin) xmax = xmin + 1.0;
    if (ymax <= ymin) ymax = ymin + 1.0;

    auto px = [&](double x) { return ML + (x - xmin) / (xmax - xmin) * (W - ML - MR); };
    auto py = [&](double y) { return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB); };

    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                   "#9467bd", "#8c564b"};
    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
        << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<rect x='" << ML << "' y='" << MT << "' width='" << (W - ML - MR)
        << "' height='" << (H - MT - MB) << "' fill='none' stroke='#888'/>\n";
    int ci = 0;
    for (const auto& s : series) {
        svg << "<polyline fill='none' stroke='" << colors[ci % 6]
            << "' stroke-width='1.2' points='";
        for (std::size_t k = 0; k < s.x.size(); ++k) {
            double y = s.y[k];
            if (log_y) {
                if (!(y > 0.0)) continue;
                y = std::log10(y);
            }
            svg << px(s.x[k]) << "," << py(y) << " ";
        }
        svg << "'/>\n";
        svg << "<text x='" << (ML + 8) << "' y='" << (MT + 16 + 14 * ci)
            << "' fill='" << colors[ci % 6] << "' font-size='12'>" << s.label
            << "</text>\n";
        ++ci;
    }
    svg << "<text x='" << (W / 2) << "' y='" << (H - 10)
        << "' font-size='12' text-anchor='middle'>t</text>\n";
    svg << "<text x='12' y='" << (H / 2) << "' font-size='12'>"
        << (log_y ? "log10" : "value") << "</text>\n";
    svg << "</svg>\n";
    write_text_file(path, svg.str());
}

}  // namespace monoflow
