#pragma once

#include <optional>
#include <span>
#include <vector>

#include "monoflow/energy.hpp"
#include "monoflow/state.hpp"

namespace monoflow {

// D(rho) = 1/2 sum_i int |v_i[rho]|^2 drho_i; Dirac species add 1/2 |v_j|^2.
double lyapunov_D(const EnergySpec& spec, const SystemState& st);
double lyapunov_D(const Velocities& vel, const SystemState& st);

// M(rho) = 1/2 sum_i int |x_i|^2 drho_i
double second_moment(const SystemState& st);

// max over species of the rho-weighted L2 norm of grad delta F_i on cells
// with rho >= mass_floor_rel * max(rho); Dirac species use |grad_h F_j|.
double nash_residual(const EnergySpec& spec, const SystemState& st,
                     double mass_floor_rel = 1e-8);

struct RateFit {
    double rate = 0.0;       // minus the slope of log y
    double intercept = 0.0;  // log y at t = 0
    double r_squared = 0.0;
    double t_start = 0.0, t_end = 0.0;
    int points_used = 0;
};

// Least squares on (t, log y) over the window. With envelope=true the fit
// runs on local maxima of |y| (for oscillatory series).
RateFit fit_rate(std::span<const double> t, std::span<const double> y,
                 double t_start, double t_end, bool envelope = false);

// c_tau = (int |v[rho^tau]|^2 d rho^tau)^(1/2) for the centered Gaussian
// mollifier with variance tau on every grid species (Dirac species sit at the
// origin). Stands in for |v[delta_0]| when Diracs are outside the admissible
// family, e.g. with diffusion present.
double mollifier_constant(const EnergySpec& spec, double tau);

}  // namespace monoflow
