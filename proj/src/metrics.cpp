#include "fwdinv/metrics.hpp"

#include "fwdinv/textio.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>

namespace fwdinv {

void WeightedPointSet::validate() const {
    if (positions.empty()) throw InvalidInput("point set is empty");
    if (weights.size() != positions.size()) throw InvalidInput("point set has mismatched weights");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInput("weights must be finite and non-negative");
        total += w;
    }
    if (!(total > 0.0)) throw InvalidInput("all weights are zero");
}

WeightedPointSet WeightedPointSet::normalized() const {
    validate();
    WeightedPointSet out = *this;
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : out.weights) w /= total;
    return out;
}

namespace {

constexpr std::int64_t kFlowUnits = std::int64_t{1} << 60;

// Integer masses summing exactly to kFlowUnits (largest remainder).
std::vector<std::int64_t> quantize(const std::vector<double>& w) {
    const long double total = std::accumulate(w.begin(), w.end(), 0.0L);
    std::vector<std::int64_t> q(w.size());
    std::vector<std::pair<long double, std::size_t>> rem(w.size());
    std::int64_t used = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const long double exact = static_cast<long double>(w[i]) / total * static_cast<long double>(kFlowUnits);
        q[i] = static_cast<std::int64_t>(std::floor(exact));
        used += q[i];
        rem[i] = {exact - static_cast<long double>(q[i]), i};
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t k = 0; used < kFlowUnits; k = (k + 1) % rem.size()) {
        ++q[rem[k].second];
        ++used;
    }
    return q;
}

}  // namespace

EmdResult emd(const WeightedPointSet& a_in, const WeightedPointSet& b_in) {
    a_in.validate();
    b_in.validate();
    const std::size_t na = a_in.size(), nb = b_in.size();
    std::vector<std::int64_t> supply = quantize(a_in.weights);
    std::vector<std::int64_t> demand = quantize(b_in.weights);

    std::vector<double> cost(na * nb);
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) cost[i * nb + j] = (a_in.positions[i] - b_in.positions[j]).norm();
    std::vector<std::int64_t> flow(na * nb, 0);

    // Nodes 0..na-1 are sources, na..na+nb-1 sinks. Dense Dijkstra with potentials.
    const std::size_t nv = na + nb;
    std::vector<double> pot(nv, 0.0), dist(nv);
    std::vector<std::ptrdiff_t> prev(nv);
    std::vector<char> done(nv);
    const double inf = std::numeric_limits<double>::infinity();
    std::int64_t remaining = kFlowUnits;
    while (remaining > 0) {
        std::fill(dist.begin(), dist.end(), inf);
        std::fill(prev.begin(), prev.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        for (std::size_t i = 0; i < na; ++i)
            if (supply[i] > 0) dist[i] = 0.0;
        std::ptrdiff_t target = -1;
        for (;;) {
            std::ptrdiff_t u = -1;
            for (std::size_t v = 0; v < nv; ++v)
                if (!done[v] && dist[v] < inf && (u < 0 || dist[v] < dist[u])) u = static_cast<std::ptrdiff_t>(v);
            if (u < 0) break;
            done[u] = 1;
            if (static_cast<std::size_t>(u) >= na) {
                const std::size_t j = static_cast<std::size_t>(u) - na;
                if (demand[j] > 0) {
                    target = u;
                    break;
                }
                // Backward residual edges j -> i.
                for (std::size_t i = 0; i < na; ++i) {
                    if (done[i] || flow[i * nb + j] == 0) continue;
                    const double rc = std::max(0.0, -cost[i * nb + j] + pot[u] - pot[i]);
                    if (dist[u] + rc < dist[i]) dist[i] = dist[u] + rc, prev[i] = u;
                }
            } else {
                const std::size_t i = static_cast<std::size_t>(u);
                for (std::size_t j = 0; j < nb; ++j) {
                    const std::size_t v = na + j;
                    if (done[v]) continue;
                    const double rc = std::max(0.0, cost[i * nb + j] + pot[i] - pot[v]);
                    if (dist[u] + rc < dist[v]) dist[v] = dist[u] + rc, prev[v] = u;
                }
            }
        }
        if (target < 0) throw Error("transport solver found no augmenting path");
        const double dt = dist[target];
        for (std::size_t v = 0; v < nv; ++v) pot[v] += std::min(dist[v], dt);

        // Bottleneck along the alternating path.
        std::int64_t push = demand[static_cast<std::size_t>(target) - na];
        std::ptrdiff_t v = target;
        while (prev[v] >= 0) {
            const std::ptrdiff_t u = prev[v];
            if (static_cast<std::size_t>(u) >= na) push = std::min(push, flow[static_cast<std::size_t>(v) * nb + (u - na)]);
            v = u;
        }
        push = std::min(push, supply[static_cast<std::size_t>(v)]);
        supply[static_cast<std::size_t>(v)] -= push;
        demand[static_cast<std::size_t>(target) - na] -= push;
        v = target;
        while (prev[v] >= 0) {
            const std::ptrdiff_t u = prev[v];
            if (static_cast<std::size_t>(u) < na) {
                flow[static_cast<std::size_t>(u) * nb + (v - na)] += push;
            } else {
                flow[static_cast<std::size_t>(v) * nb + (u - na)] -= push;
            }
            v = u;
        }
        remaining -= push;
    }

    EmdResult out;
    long double total = 0.0L;
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) {
            const std::int64_t f = flow[i * nb + j];
            if (f == 0) continue;
            const double amount = static_cast<double>(static_cast<long double>(f) / kFlowUnits);
            out.plan.flows.push_back({i, j, amount});
            total += static_cast<long double>(f) / kFlowUnits * cost[i * nb + j];
        }
    out.plan.cost = static_cast<double>(total);
    out.distance = out.plan.cost;
    return out;
}

double emd_singleton(const Vec3& p, const WeightedPointSet& b) {
    const auto nb = b.normalized();
    long double s = 0.0L;
    for (std::size_t j = 0; j < nb.size(); ++j) s += nb.weights[j] * (p - nb.positions[j]).norm();
    return static_cast<double>(s);
}

PositionRule parse_position_rule(const std::string& tag) {
    if (tag == "argmax") return PositionRule::Argmax;
    if (tag == "centroid") return PositionRule::Centroid;
    throw InvalidInput("unknown position rule '" + tag + "'");
}

Vec3 estimated_position(const VectorX& amplitude, const std::vector<Vec3>& positions, PositionRule rule,
                        double threshold) {
    if (static_cast<std::size_t>(amplitude.size()) != positions.size() || positions.empty()) {
        throw InvalidInput("amplitude and position counts differ");
    }
    if (!amplitude.allFinite()) throw InvalidInput("reconstruction is not finite");
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < amplitude.size(); ++i)
        if (amplitude[i] > amplitude[best]) best = i;
    const double top = amplitude[best];
    if (!(top > 0.0)) throw InvalidInput("reconstruction is all zero");
    if (rule == PositionRule::Argmax) return positions[static_cast<std::size_t>(best)];
    Vec3 sum = Vec3::Zero();
    double weight = 0.0;
    for (Eigen::Index i = 0; i < amplitude.size(); ++i) {
        if (amplitude[i] >= threshold * top) {
            sum += amplitude[i] * positions[static_cast<std::size_t>(i)];
            weight += amplitude[i];
        }
    }
    return sum / weight;
}

double localization_error(const Vec3& truth, const Vec3& estimate) { return (truth - estimate).norm(); }

RegressionReport depth_bias_regression(const std::vector<double>& x, const std::vector<double>& y, int grid_points) {
    if (x.size() != y.size()) throw InvalidInput("regression inputs differ in length");
    const std::size_t n = x.size();
    if (n < 3) throw InvalidInput("regression needs at least three pairs");
    if (grid_points < 2) throw InvalidInput("regression grid needs at least two points");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    const double xmin = *std::min_element(x.begin(), x.end());
    const double xmax = *std::max_element(x.begin(), x.end());
    if (!(sxx > 0.0) || xmax == xmin) throw InvalidInput("true depths are constant");
    RegressionReport r;
    r.n = n;
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    double sse = 0.0;
    r.residuals.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        r.residuals[i] = y[i] - (r.intercept + r.slope * x[i]);
        sse += r.residuals[i] * r.residuals[i];
    }
    r.residual_std = std::sqrt(sse / static_cast<double>(n - 2));
    const boost::math::students_t dist(static_cast<double>(n - 2));
    const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
    for (int g = 0; g < grid_points; ++g) {
        const double xg = xmin + (xmax - xmin) * g / (grid_points - 1);
        const double fit = r.intercept + r.slope * xg;
        const double half =
            t * r.residual_std * std::sqrt(1.0 / static_cast<double>(n) + (xg - mx) * (xg - mx) / sxx);
        r.grid.push_back(xg);
        r.fit.push_back(fit);
        r.lower.push_back(fit - half);
        r.upper.push_back(fit + half);
    }
    return r;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InvalidInput("Spearman needs two equal-length series");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) throw InvalidInput("Spearman correlation undefined for a constant series");
    return sxy / std::sqrt(sxx * syy);
}

double median(std::vector<double> values) {
    if (values.empty()) throw InvalidInput("median of an empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {
constexpr const char* kMetricsHeader = "solver,source_model,source_index,true_depth_mm,est_depth_mm,loc_err_mm,emd_mm";
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        os << r.solver << ',' << r.source_model << ',' << r.source_index << ',' << format_double(r.true_depth_mm)
           << ',' << format_double(r.est_depth_mm) << ',' << format_double(r.loc_err_mm) << ','
           << format_double(r.emd_mm) << '\n';
    }
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line) || trim(line) != kMetricsHeader) {
        throw FormatError("metrics CSV '" + path.string() + "' lacks the expected header");
    }
    std::vector<MetricsRow> rows;
    while (std::getline(is, line)) {
        if (trim(line).empty()) continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            const auto pos = line.find(',', start);
            f.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        if (f.size() != 7) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields, expected 7");
        MetricsRow r;
        r.solver = f[0];
        r.source_model = f[1];
        r.source_index = parse_u64(f[2]);
        r.true_depth_mm = parse_double(f[3]);
        r.est_depth_mm = parse_double(f[4]);
        r.loc_err_mm = parse_double(f[5]);
        r.emd_mm = parse_double(f[6]);
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace fwdinv
