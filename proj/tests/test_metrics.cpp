#include "fwdinv/metrics.hpp"

#include "oracles/lp_transport.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace fwdinv;
namespace fs = std::filesystem;

namespace {

WeightedPointSet random_set(std::mt19937_64& rng, int n, bool sparse = false) {
    std::uniform_real_distribution<double> u(-50, 50), w(0, 1);
    WeightedPointSet s;
    for (int i = 0; i < n; ++i) {
        s.positions.emplace_back(u(rng), u(rng), u(rng));
        s.weights.push_back(sparse && w(rng) < 0.3 ? 0.0 : w(rng));
    }
    if (std::all_of(s.weights.begin(), s.weights.end(), [](double x) { return x == 0.0; })) s.weights[0] = 1.0;
    return s;
}

double lp(const WeightedPointSet& a, const WeightedPointSet& b) {
    return oracle::transport_lp(a.positions, a.weights, b.positions, b.weights);
}

fs::path temp_dir() {
    const auto dir = fs::temp_directory_path() / "fwdinv_test_metrics";
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("EMD equals the transportation LP optimum") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> size(1, 7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto a = random_set(rng, size(rng), trial % 3 == 0);
        const auto b = random_set(rng, size(rng), trial % 4 == 0);
        const auto r = emd(a, b);
        CHECK(std::abs(r.distance - lp(a, b)) <= 1e-9 * std::max(1.0, r.distance));
        // The plan is feasible and its cost equals the distance.
        const auto an = a.normalized(), bn = b.normalized();
        std::vector<double> out(a.size(), 0.0), in(b.size(), 0.0);
        double cost = 0.0;
        for (const auto& f : r.plan.flows) {
            CHECK(f.amount >= 0.0);
            out[f.from] += f.amount;
            in[f.to] += f.amount;
            cost += f.amount * (a.positions[f.from] - b.positions[f.to]).norm();
        }
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == doctest::Approx(an.weights[i]).epsilon(1e-12));
        for (std::size_t j = 0; j < b.size(); ++j) CHECK(in[j] == doctest::Approx(bn.weights[j]).epsilon(1e-12));
        CHECK(cost == doctest::Approx(r.distance).epsilon(1e-12));
        CHECK(r.plan.cost == doctest::Approx(r.distance).epsilon(1e-12));
    }
}

TEST_CASE("EMD to a single point is the weighted mean distance") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> size(1, 40);
    for (int trial = 0; trial < 200; ++trial) {
        const auto b = random_set(rng, size(rng), trial % 2 == 0);
        const Vec3 p = random_set(rng, 1).positions[0];
        double sum = 0.0, expected = 0.0;
        for (double w : b.weights) sum += w;
        for (std::size_t j = 0; j < b.size(); ++j) expected += b.weights[j] / sum * (p - b.positions[j]).norm();
        CHECK(std::abs(emd_singleton(p, b) - expected) <= 1e-12 * std::max(1.0, expected));
        const WeightedPointSet a{{p}, {3.0}};
        CHECK(std::abs(emd(a, b).distance - expected) <= 1e-12 * std::max(1.0, expected));
    }
}

TEST_CASE("EMD is a metric on normalized distributions") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const auto a = random_set(rng, 5), b = random_set(rng, 6), c = random_set(rng, 4);
        CHECK(emd(a, a).distance <= 1e-12);
        CHECK(emd(a, b).distance == doctest::Approx(emd(b, a).distance).epsilon(1e-12));
        CHECK(emd(a, c).distance <= emd(a, b).distance + emd(b, c).distance + 1e-9);
        // Invariant to weight scaling.
        WeightedPointSet scaled = a;
        for (double& w : scaled.weights) w *= 17.0;
        CHECK(emd(scaled, b).distance == doctest::Approx(emd(a, b).distance).epsilon(1e-12));
        // Translating both sets leaves the distance unchanged.
        WeightedPointSet ta = a, tb = b;
        for (auto& p : ta.positions) p += Vec3(5, -3, 2);
        for (auto& p : tb.positions) p += Vec3(5, -3, 2);
        CHECK(emd(ta, tb).distance == doctest::Approx(emd(a, b).distance).epsilon(1e-9));
    }
    // Translating one point mass moves the distance by the shift.
    const WeightedPointSet x{{Vec3(0, 0, 0)}, {1.0}}, y{{Vec3(3, 4, 0)}, {2.0}};
    CHECK(emd(x, y).distance == doctest::Approx(5.0));
}

TEST_CASE("point sets are validated") {
    WeightedPointSet s{{Vec3::Zero(), Vec3::Ones()}, {1.0}};
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.weights = {1.0, -1.0};
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.weights = {0.0, 0.0};
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.weights = {1.0, std::nan("")};
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.weights = {1.0, 3.0};
    CHECK(s.normalized().weights == std::vector<double>{0.25, 0.75});
    CHECK_THROWS_AS(emd(WeightedPointSet{}, s), InvalidInput);
    CHECK_THROWS_AS(emd_singleton(Vec3::Zero(), WeightedPointSet{}), InvalidInput);
}

TEST_CASE("estimated position rules") {
    const std::vector<Vec3> pos{{0, 0, 0}, {10, 0, 0}, {0, 10, 0}, {0, 0, 10}};
    VectorX amp(4);
    amp << 1.0, 4.0, 4.0, 2.0;
    CHECK(estimated_position(amp, pos, PositionRule::Argmax) == pos[1]);
    // Threshold 0.5 keeps amplitudes >= 2.
    const Vec3 c = estimated_position(amp, pos, PositionRule::Centroid, 0.5);
    CHECK((c - Vec3(40, 40, 20) / 10.0).norm() < 1e-12);
    CHECK(parse_position_rule("argmax") == PositionRule::Argmax);
    CHECK(parse_position_rule("centroid") == PositionRule::Centroid);
    CHECK_THROWS_AS(parse_position_rule("mode"), InvalidInput);
    CHECK(localization_error(Vec3(1, 2, 2), Vec3::Zero()) == doctest::Approx(3.0));
}

TEST_CASE("depth-bias regression matches closed-form OLS and the t band") {
    const std::vector<double> x{2, 5, 7, 11, 13, 17, 19, 23, 29, 31};
    std::vector<double> y;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0, 2);
    for (double v : x) y.push_back(0.8 * v + 4.0 + g(rng));
    const auto r = depth_bias_regression(x, y, 11);
    const double n = 10;
    double mx = 0, my = 0;
    for (int i = 0; i < 10; ++i) mx += x[i] / n, my += y[i] / n;
    double sxx = 0, sxy = 0;
    for (int i = 0; i < 10; ++i) sxx += (x[i] - mx) * (x[i] - mx), sxy += (x[i] - mx) * (y[i] - my);
    const double slope = sxy / sxx, intercept = my - slope * mx;
    CHECK(r.slope == doctest::Approx(slope).epsilon(1e-12));
    CHECK(r.intercept == doctest::Approx(intercept).epsilon(1e-12));
    double sse = 0;
    for (int i = 0; i < 10; ++i) {
        const double e = y[i] - (intercept + slope * x[i]);
        CHECK(r.residuals[static_cast<std::size_t>(i)] == doctest::Approx(e).epsilon(1e-10));
        sse += e * e;
    }
    const double s = std::sqrt(sse / 8.0);
    CHECK(r.residual_std == doctest::Approx(s).epsilon(1e-12));
    CHECK(r.n == 10);
    REQUIRE(r.grid.size() == 11);
    CHECK(r.grid.front() == 2.0);
    CHECK(r.grid.back() == 31.0);
    const double t = 2.306004135204166;  // 97.5% quantile, 8 degrees of freedom
    for (std::size_t k = 0; k < r.grid.size(); ++k) {
        const double xg = r.grid[k];
        const double half = t * s * std::sqrt(1.0 / n + (xg - mx) * (xg - mx) / sxx);
        CHECK(r.fit[k] == doctest::Approx(intercept + slope * xg).epsilon(1e-12));
        CHECK(r.upper[k] - r.fit[k] == doctest::Approx(half).epsilon(1e-9));
        CHECK(r.fit[k] - r.lower[k] == doctest::Approx(half).epsilon(1e-9));
    }
    CHECK_THROWS_AS(depth_bias_regression({1, 2}, {1, 2}), InvalidInput);
    CHECK_THROWS_AS(depth_bias_regression({1, 1, 1}, {1, 2, 3}), InvalidInput);
    CHECK_THROWS_AS(depth_bias_regression({1, 2, 3}, {1, 2}), InvalidInput);
}

TEST_CASE("perfect data regresses to the identity") {
    std::vector<double> x{1, 4, 9, 16, 25};
    const auto r = depth_bias_regression(x, x);
    CHECK(r.slope == doctest::Approx(1.0));
    CHECK(std::abs(r.intercept) < 1e-12);
    CHECK(r.residual_std < 1e-12);
}

TEST_CASE("Spearman uses average ranks for ties") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    // Ranks x: 1, 2.5, 2.5, 4; y: 1, 2, 3, 4 -> Pearson of the ranks.
    const double rx[] = {1, 2.5, 2.5, 4}, ry[] = {1, 2, 3, 4};
    double mx = 2.5, my = 2.5, sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 4; ++i) sxy += (rx[i] - mx) * (ry[i] - my), sxx += (rx[i] - mx) * (rx[i] - mx), syy += (ry[i] - my) * (ry[i] - my);
    CHECK(spearman({1, 5, 5, 9}, {1, 2, 3, 4}) == doctest::Approx(sxy / std::sqrt(sxx * syy)));
    CHECK_THROWS_AS(spearman({1, 2}, {1}), InvalidInput);
    CHECK_THROWS_AS(spearman({1, 1, 1}, {1, 2, 3}), InvalidInput);
}

TEST_CASE("median") {
    CHECK(median({3, 1, 2}) == 2.0);
    CHECK(median({4, 1, 3, 2}) == 2.5);
    CHECK_THROWS_AS(median({}), InvalidInput);
}

TEST_CASE("metrics CSV round-trips exactly") {
    std::vector<MetricsRow> rows;
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 60);
    for (std::size_t i = 0; i < 20; ++i)
        rows.push_back({i % 2 ? "shal1r" : "sloreta", "whitney-mpo", i, u(rng), u(rng), u(rng), u(rng)});
    const auto path = temp_dir() / "metrics.csv";
    write_metrics_csv(rows, path);
    CHECK(read_metrics_csv(path) == rows);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "solver,source_model,source_index,true_depth_mm,est_depth_mm,loc_err_mm,emd_mm");
    {
        std::ofstream os(path);
        os << "solver,source_model\nx,y\n";
    }
    CHECK_THROWS_AS(read_metrics_csv(path), FormatError);
    {
        std::ofstream os(path);
        os << "solver,source_model,source_index,true_depth_mm,est_depth_mm,loc_err_mm,emd_mm\nsl,pi,0,1,2,3\n";
    }
    CHECK_THROWS_AS(read_metrics_csv(path), FormatError);
}
