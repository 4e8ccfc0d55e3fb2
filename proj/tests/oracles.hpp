#pragma once

// Test-only reference implementations, independent of the library's solvers.

#include "monoflow/common.hpp"
#include "monoflow/transport.hpp"

namespace monoflow::oracle {

// Dense two-phase tableau simplex with Bland's rule for
//   min c^T x  s.t.  A x = b, x >= 0.
// Small problems only. Throws on infeasibility.
double lp_solve_equality(std::vector<std::vector<double>> A, std::vector<double> b,
                         std::vector<double> c);

// Optimal quadratic transport cost via the generic LP above.
double transport_cost_lp(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

// Brute-force radial minimization of the Morse Hessian eigenvalue expressions.
double morse_bound_bruteforce(double cr, double lr, double ca, double la,
                              double rmax = 10.0, long long samples = 1000000);

// Brute-force bound for |x|^a/a - |x|^b/b (min eigenvalue over a radius grid).
double power_law_bound_bruteforce(double a, double b, double rmax = 10.0,
                                  long long samples = 1000000);

// Random discrete probability measure with `n` support points in [-1,1]^d.
DiscreteMeasure random_measure(Rng& rng, int n, int dim);

}  // namespace monoflow::oracle

namespace monoflow::oracle {

// 1d quadratic transport cost via the monotone (quantile) coupling.
double quantile_cost_1d(const DiscreteMeasure& mu, const DiscreteMeasure& nu);

}  // namespace monoflow::oracle
