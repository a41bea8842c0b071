// Randomized invariants across modules.
#include "fwdinv/experiments.hpp"

#include <doctest.h>

#include <random>

using namespace fwdinv;

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    const Vec3 axis = Vec3(g(rng), g(rng), g(rng)).normalized();
    return Eigen::AngleAxisd(g(rng), axis).toRotationMatrix();
}

WeightedPointSet random_set(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> u(-40, 40), w(0.01, 1);
    WeightedPointSet s;
    for (int i = 0; i < n; ++i) {
        s.positions.emplace_back(u(rng), u(rng), u(rng));
        s.weights.push_back(w(rng));
    }
    return s;
}

MatrixX random_lead(std::mt19937_64& rng, int m, int n) {
    std::normal_distribution<double> g;
    MatrixX l(m, 3 * n);
    for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = g(rng);
    l.rowwise() -= l.colwise().mean();
    return l;
}

const Mesh& coarse() {
    static const Mesh mesh = build_layered_sphere_mesh(LayeredSphereSpec::four_layer(1));
    return mesh;
}

}  // namespace

TEST_CASE("EMD is invariant under rigid motion and homogeneous under scaling") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 40; ++trial) {
        const auto a = random_set(rng, 1 + trial % 6), b = random_set(rng, 1 + (trial * 7) % 5);
        const double d = emd(a, b).distance;
        const Mat3 r = random_rotation(rng);
        const Vec3 t(3.0, -8.0, 1.5);
        const double s = 0.5 + trial * 0.1;
        WeightedPointSet ra = a, rb = b, sa = a, sb = b;
        for (auto& p : ra.positions) p = r * p + t;
        for (auto& p : rb.positions) p = r * p + t;
        for (auto& p : sa.positions) p *= s;
        for (auto& p : sb.positions) p *= s;
        CHECK(emd(ra, rb).distance == doctest::Approx(d).epsilon(1e-9));
        CHECK(emd(sa, sb).distance == doctest::Approx(s * d).epsilon(1e-9));
        // Lower bound: distance between the centroids.
        Vec3 ca = Vec3::Zero(), cb = Vec3::Zero();
        const auto na = a.normalized(), nb = b.normalized();
        for (std::size_t i = 0; i < a.size(); ++i) ca += na.weights[i] * a.positions[i];
        for (std::size_t i = 0; i < b.size(); ++i) cb += nb.weights[i] * b.positions[i];
        CHECK((ca - cb).norm() <= d + 1e-9);
    }
}

TEST_CASE("stiffness is invariant under rotating geometry and conductivity together") {
    const Mesh mesh = apply_radial_anisotropy(build_layered_sphere_mesh(LayeredSphereSpec::four_layer(0)), 0, 0.33, 2.0);
    std::mt19937_64 rng(2);
    const auto a = assemble_stiffness(mesh);
    for (int trial = 0; trial < 3; ++trial) {
        const auto b = assemble_stiffness(mesh.rotated(random_rotation(rng)));
        REQUIRE(a.val.size() == b.val.size());
        CHECK(a.col == b.col);
        double scale = 0.0, diff = 0.0;
        for (std::size_t k = 0; k < a.val.size(); ++k) {
            scale = std::max(scale, std::abs(a.val[k]));
            diff = std::max(diff, std::abs(a.val[k] - b.val[k]));
        }
        CHECK(diff <= 1e-12 * scale);
    }
}

TEST_CASE("electrode readout ignores constant potential offsets") {
    const Mesh& mesh = coarse();
    const auto electrodes = attach_electrodes(mesh, cap_electrode_positions(20, 100.0, 92.0));
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> u(mesh.num_vertices());
        for (auto& x : u) x = g(rng);
        std::vector<double> shifted = u;
        const double c = 10.0 * g(rng);
        for (auto& x : shifted) x += c;
        const VectorX a = electrode_readout(u, electrodes), b = electrode_readout(shifted, electrodes);
        CHECK((a - b).norm() <= 1e-12 * (1.0 + std::abs(c)) * a.size());
        CHECK(std::abs(a.sum()) <= 1e-12 * a.cwiseAbs().sum());
    }
}

TEST_CASE("every source model load is compatible for random brain positions") {
    const Mesh& mesh = coarse();
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-70, 70);
    std::normal_distribution<double> g;
    int tested = 0;
    while (tested < 25) {
        const Vec3 p(u(rng), u(rng), u(rng));
        if (p.norm() > 70.0 || !has_vertex_clearance(mesh, p, 0.1)) continue;
        ++tested;
        const Vec3 q(g(rng), g(rng), g(rng));
        for (auto m : {SourceModel::PartialIntegration, SourceModel::WhitneyPbo, SourceModel::WhitneyMpo,
                       SourceModel::Hdiv, SourceModel::LocalSubtraction}) {
            const auto b = rhs(mesh, {p, q}, m);
            CHECK(std::abs(b.sum()) <= 1e-9 * b.max_abs());
            CHECK(std::is_sorted(b.entries.begin(), b.entries.end(),
                                 [](const auto& x, const auto& y) { return x.first < y.first; }));
            // Reversing the moment negates the load.
            const auto neg = rhs(mesh, {p, -q}, m);
            REQUIRE(neg.entries.size() == b.entries.size());
            for (std::size_t k = 0; k < b.entries.size(); ++k)
                CHECK(neg.entries[k].second == doctest::Approx(-b.entries[k].second).epsilon(1e-12));
        }
    }
}

TEST_CASE("sLORETA and SHAL1R maxima are invariant to data and lead-field scaling") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 10; ++trial) {
        const MatrixX l = random_lead(rng, 16, 25);
        VectorX v(16);
        for (auto& x : v) x = g(rng);
        v.array() -= v.mean();
        const double lambda = select_lambda(l, 20.0);
        const double c = 3.7, s = 0.25;
        const auto base = sloreta(l, Measurement::single(v), lambda).final_amplitude();
        const auto scaled_data = sloreta(l, Measurement::single(c * v), lambda).final_amplitude();
        CHECK((scaled_data - c * base).norm() <= 1e-9 * c * base.norm());
        // lambda follows trace(L L^T), so scaling L leaves the selection unchanged.
        const MatrixX ls = s * l;
        const auto scaled_lead = sloreta(ls, Measurement::single(v), select_lambda(ls, 20.0)).final_amplitude();
        CHECK(argmax_lowest(scaled_lead) == argmax_lowest(base));

        Shal1rParams p;
        p.lambda_std = lambda;
        p.penalty = 0.3;
        const auto sh = shal1r(l, Measurement::single(v), p).final_amplitude();
        Shal1rParams ps = p;
        ps.lambda_std = select_lambda(ls, 20.0);
        const auto sh_scaled = shal1r(ls, Measurement::single(c * v), ps).final_amplitude();
        CHECK(argmax_lowest(sh_scaled) == argmax_lowest(sh));
    }
}

TEST_CASE("Spearman is invariant under monotone transforms") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> x(30), y(30);
        for (std::size_t i = 0; i < 30; ++i) {
            x[i] = g(rng);
            y[i] = 0.5 * x[i] + g(rng);
        }
        std::vector<double> fx = x, fy = y;
        for (auto& v : fx) v = std::exp(v);
        for (auto& v : fy) v = v * v * v + 2.0;
        CHECK(spearman(fx, fy) == doctest::Approx(spearman(x, y)).epsilon(1e-12));
        CHECK(spearman(x, y) == doctest::Approx(spearman(y, x)).epsilon(1e-12));
        CHECK(std::abs(spearman(x, y)) <= 1.0 + 1e-12);
    }
}

TEST_CASE("regression recovers exact lines and is equivariant") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0, 60);
    for (int trial = 0; trial < 20; ++trial) {
        const double a = u(rng) / 10.0 - 3.0, b = u(rng) / 30.0;
        std::vector<double> x(15), y(15), y2(15);
        for (std::size_t i = 0; i < 15; ++i) {
            x[i] = u(rng);
            y[i] = a + b * x[i];
            y2[i] = y[i] + u(rng) / 10.0;
        }
        const auto r = depth_bias_regression(x, y);
        CHECK(r.slope == doctest::Approx(b).epsilon(1e-9));
        CHECK(r.intercept == doctest::Approx(a).scale(1.0).epsilon(1e-9));
        // Shifting the response shifts only the intercept.
        std::vector<double> shifted = y2;
        for (auto& v : shifted) v += 5.0;
        const auto r2 = depth_bias_regression(x, y2), r3 = depth_bias_regression(x, shifted);
        CHECK(r3.slope == doctest::Approx(r2.slope).epsilon(1e-12));
        CHECK(r3.intercept == doctest::Approx(r2.intercept + 5.0).epsilon(1e-12));
        for (std::size_t k = 0; k < r2.grid.size(); ++k) CHECK(r2.lower[k] <= r2.fit[k]);
        for (std::size_t k = 0; k < r2.grid.size(); ++k) CHECK(r2.fit[k] <= r2.upper[k]);
    }
}

TEST_CASE("config text is a fixed point for random configurations") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> ui(0, 1000);
    const std::vector<std::string> models{"pi", "whitney-pbo", "whitney-mpo", "hdiv", "localsub"};
    for (int trial = 0; trial < 30; ++trial) {
        ExperimentConfig c;
        c.refinement = ui(rng) % 4;
        c.electrode_count = 10 + ui(rng) % 90;
        c.snr_db = ui(rng) / 37.0 - 5.0;
        c.shal1r_penalty = 0.01 + ui(rng) / 1200.0;
        c.seed = static_cast<std::uint64_t>(ui(rng)) << 40;
        c.noise = ui(rng) % 2;
        c.source_models = {models[static_cast<std::size_t>(trial) % 5], models[static_cast<std::size_t>(trial + 2) % 5]};
        c.exp1_electrode = ui(rng) % c.electrode_count;
        const auto back = parse_config(c.to_ini());
        CHECK(back.to_ini() == c.to_ini());
        CHECK(back.hash() == c.hash());
        CHECK(back.seed == c.seed);
        CHECK(back.snr_db == c.snr_db);
    }
}
