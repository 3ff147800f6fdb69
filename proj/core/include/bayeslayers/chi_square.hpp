#pragma once

namespace bayeslayers {

// Regularized lower incomplete gamma P(a, x) for a > 0, x >= 0.
double regularized_gamma_p(double a, double x);

// P(chi^2_dof <= x).
double chi_square_cdf(unsigned dof, double x);

// r^2 with P(chi^2_dof <= r^2) = q, for q in [0, 1). Wilson-Hilferty start,
// then bisection on the CDF; absolute error well below 1e-6. q = 0 gives 0.
double chi_square_quantile(unsigned dof, double q);

}  // namespace bayeslayers
