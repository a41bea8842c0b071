// Quadrature on tetrahedra.
#pragma once

#include <array>
#include <vector>

namespace fwdinv {

/// Gauss-Legendre nodes and weights on [0, 1].
struct GaussRule1d {
    std::vector<double> nodes;
    std::vector<double> weights;
};
GaussRule1d gauss_legendre_01(int points);

/// Points in barycentric coordinates; weights sum to 1, so that
/// integral over T of f ~= volume(T) * sum_q w_q f(x_q).
struct TetRule {
    std::vector<std::array<double, 4>> bary;
    std::vector<double> weights;
};

/// Collapsed (conical product) Gauss rule, exact for polynomials up to `degree`.
const TetRule& tet_rule(int degree);

}  // namespace fwdinv
