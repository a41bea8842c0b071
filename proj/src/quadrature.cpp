#include "fwdinv/quadrature.hpp"

#include "fwdinv/core.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>

namespace fwdinv {

GaussRule1d gauss_legendre_01(int points) {
    if (points < 1) throw InvalidInput("Gauss rule needs at least one point");
    GaussRule1d rule;
    rule.nodes.resize(points);
    rule.weights.resize(points);
    for (int i = 0; i < points; ++i) {
        // Newton on P_n starting from the Chebyshev-like guess.
        double x = std::cos(std::numbers::pi * (i + 0.75) / (points + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= points; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            const double pn = points == 1 ? x : p1;
            const double pm = points == 1 ? 1.0 : p0;
            dp = points * (x * pn - pm) / (x * x - 1.0);
            const double dx = pn / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= points; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = points == 1 ? 1.0 : points * (x * p1 - p0) / (x * x - 1.0);
        }
        rule.nodes[i] = 0.5 * (1.0 - x);
        rule.weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);  // 2/((1-x^2)P'^2) halved for [0,1]
    }
    return rule;
}

namespace {

TetRule make_collapsed_rule(int degree) {
    const int n = (degree + 4) / 2;  // 2n - 1 >= degree + 2
    const auto g = gauss_legendre_01(n);
    TetRule rule;
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            for (int c = 0; c < n; ++c) {
                const double u = g.nodes[a], v = g.nodes[b], w = g.nodes[c];
                const double xi = u;
                const double eta = (1.0 - u) * v;
                const double zeta = (1.0 - u) * (1.0 - v) * w;
                // Jacobian (1-u)^2 (1-v); reference volume 1/6.
                const double wt = 6.0 * g.weights[a] * g.weights[b] * g.weights[c] * (1.0 - u) * (1.0 - u) * (1.0 - v);
                rule.bary.push_back({1.0 - xi - eta - zeta, xi, eta, zeta});
                rule.weights.push_back(wt);
            }
    return rule;
}

}  // namespace

const TetRule& tet_rule(int degree) {
    static std::mutex mutex;
    static std::map<int, TetRule> cache;
    std::lock_guard lock(mutex);
    auto it = cache.find(degree);
    if (it == cache.end()) it = cache.emplace(degree, make_collapsed_rule(degree)).first;
    return it->second;
}

}  // namespace fwdinv
