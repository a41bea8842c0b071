#include "fwdinv/source_models.hpp"

#include "oracles/geometry.hpp"

#include <doctest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>

using namespace fwdinv;

namespace {

const Mesh& head() {
    static const Mesh mesh = build_layered_sphere_mesh(LayeredSphereSpec::four_layer(1));
    return mesh;
}

const std::vector<Vec3>& interior_points() {
    static const std::vector<Vec3> pts{{13.1, -7.3, 21.7}, {-30.2, 17.9, 5.3}, {2.6, 41.4, -33.8}, {0.7, 1.9, 60.3}};
    return pts;
}

Vec3 load_moment(const Mesh& mesh, const LoadVector& b) {
    Vec3 m = Vec3::Zero();
    for (const auto& [v, w] : b.entries) m += w * mesh.vertex(v);
    return m;
}

std::array<Vec3, 4> corners(const Mesh& mesh, int e) {
    const auto& t = mesh.tet(e);
    return {mesh.vertex(t[0]), mesh.vertex(t[1]), mesh.vertex(t[2]), mesh.vertex(t[3])};
}

}  // namespace

TEST_CASE("source model tags round-trip") {
    for (auto m : {SourceModel::PartialIntegration, SourceModel::WhitneyPbo, SourceModel::WhitneyMpo, SourceModel::Hdiv,
                   SourceModel::LocalSubtraction})
        CHECK(parse_source_model(to_string(m)) == m);
    CHECK(to_string(SourceModel::WhitneyMpo) == "whitney-mpo");
    CHECK(to_string(SourceModel::LocalSubtraction) == "localsub");
    CHECK_THROWS_AS(parse_source_model("venant"), InvalidInput);
}

TEST_CASE("partial integration equals finite differences of barycentrics") {
    const Mesh& mesh = head();
    const Vec3 q(0.3, -1.2, 0.8);
    for (const Vec3& p : interior_points()) {
        const auto b = rhs_partial_integration(mesh, {p, q});
        const int e = mesh.locate(p).element;
        const auto c = corners(mesh, e);
        const double h = 1e-3;
        CHECK(b.entries.size() == 4);
        for (int i = 0; i < 4; ++i) {
            Vec3 g;
            for (int a = 0; a < 3; ++a) {
                const Vec3 dp = h * Vec3::Unit(a);
                g[a] = (oracle::barycentric(c, p + dp)[static_cast<std::size_t>(i)] -
                        oracle::barycentric(c, p - dp)[static_cast<std::size_t>(i)]) / (2 * h);
            }
            CHECK(b.at(mesh.tet(e)[static_cast<std::size_t>(i)]) == doctest::Approx(q.dot(g)).epsilon(1e-8));
        }
        CHECK(std::abs(b.sum()) < 1e-14);
        CHECK((load_moment(mesh, b) - q).norm() < 1e-12);
    }
}

TEST_CASE("interior elements have four face and six edge descriptors") {
    const Mesh& mesh = head();
    const int e = mesh.locate(interior_points()[0]).element;
    const auto set = enumerate_hdiv_basis(mesh, e);
    CHECK_FALSE(set.restricted);
    int faces = 0, edges = 0;
    std::set<std::pair<int, int>> poles;
    for (const auto& d : set.descriptors) {
        (d.kind == HdivBasisDescriptor::Kind::FaceIntersecting ? faces : edges) += 1;
        poles.insert({d.poles[0], d.poles[1]});
        CHECK(d.direction.norm() == doctest::Approx(1.0));
        CHECK((mesh.vertex(d.poles[1]) - mesh.vertex(d.poles[0])).norm() == doctest::Approx(d.length));
        CHECK(std::find(d.support.begin(), d.support.end(), e) != d.support.end());
    }
    CHECK(faces == 4);
    CHECK(edges == 6);
    CHECK(poles.size() == 10);
}

TEST_CASE("boundary elements drop descriptors") {
    const Mesh& mesh = head();
    const auto b = mesh.boundary_vertices();
    const int e = mesh.vertex_elements(b.front())[0];
    CHECK(enumerate_hdiv_basis(mesh, e).restricted);
}

TEST_CASE("descriptor coupling and moment match centroid quadrature") {
    // Fields are affine per element and gradients constant, so the one-point
    // centroid rule is exact.
    const Mesh& mesh = head();
    for (const Vec3& p : interior_points()) {
        const auto set = enumerate_hdiv_basis(mesh, mesh.locate(p).element);
        for (const auto& d : set.descriptors) {
            Vec3 moment = Vec3::Zero();
            std::map<int, double> g;
            for (int s : d.support) {
                const Vec3 w = descriptor_field(mesh, d, s, mesh.centroid(s));
                moment += mesh.volume(s) * w;
                for (int i = 0; i < 4; ++i)
                    g[mesh.tet(s)[static_cast<std::size_t>(i)]] += mesh.volume(s) * w.dot(mesh.grads(s)[static_cast<std::size_t>(i)]);
            }
            CHECK((moment - d.direction).norm() < 1e-12);
            const auto c = d.coupling();
            std::map<int, double> expected(c.begin(), c.end());
            for (const auto& [v, value] : g) {
                const double ref = expected.count(v) ? expected[v] : 0.0;
                CHECK(value == doctest::Approx(ref).scale(1.0 / d.length).epsilon(1e-10));
            }
        }
    }
}

TEST_CASE("face descriptors have continuous normal components") {
    const Mesh& mesh = head();
    const int e = mesh.locate(interior_points()[1]).element;
    const auto set = enumerate_hdiv_basis(mesh, e);
    for (const auto& d : set.descriptors) {
        if (d.kind != HdivBasisDescriptor::Kind::FaceIntersecting) continue;
        const int local = d.entity[1];
        std::array<Vec3, 3> f;
        int k = 0;
        for (int i = 0; i < 4; ++i)
            if (i != local) f[static_cast<std::size_t>(k++)] = mesh.vertex(mesh.tet(e)[static_cast<std::size_t>(i)]);
        const Vec3 n = (f[1] - f[0]).cross(f[2] - f[0]).normalized();
        for (const Vec3& bary : {Vec3(1.0 / 3, 1.0 / 3, 1.0 / 3), Vec3(0.6, 0.3, 0.1), Vec3(0.05, 0.15, 0.8)}) {
            const Vec3 x = bary[0] * f[0] + bary[1] * f[1] + bary[2] * f[2];
            const double in = n.dot(descriptor_field(mesh, d, d.support[0], x));
            const double out = n.dot(descriptor_field(mesh, d, d.support[1], x));
            CHECK(in == doctest::Approx(out).epsilon(1e-10));
        }
        // Zero off the support.
        CHECK(descriptor_field(mesh, d, -1, mesh.centroid(e)).norm() == 0.0);
    }
}

TEST_CASE("divergence-conforming models reproduce the dipole moment exactly") {
    const Mesh& mesh = head();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    for (const Vec3& p : interior_points()) {
        const Vec3 q(g(rng), g(rng), g(rng));
        for (auto m : {SourceModel::WhitneyPbo, SourceModel::WhitneyMpo, SourceModel::Hdiv}) {
            const auto b = rhs(mesh, {p, q}, m);
            CHECK(b.model == m);
            CHECK(std::abs(b.sum()) < 1e-12 * b.max_abs());
            CHECK((load_moment(mesh, b) - q).norm() < 1e-10 * q.norm());
        }
        // PBO loads live on the element and its four face neighbours.
        CHECK(rhs(mesh, {p, q}, SourceModel::WhitneyPbo).entries.size() <= 8);
    }
}

TEST_CASE("whitney fit is the distance-weighted minimum norm solution") {
    const Mesh& mesh = head();
    const Vec3 p = interior_points()[2];
    const auto set = enumerate_hdiv_basis(mesh, mesh.locate(p).element);
    const Eigen::MatrixXd c = whitney_coefficients(mesh, set, p, WhitneyFit::Mpo);
    Eigen::MatrixXd d(3, c.rows());
    Eigen::VectorXd w(c.rows());
    const double h = mesh.edge_length(mesh.locate(p).element);
    for (Eigen::Index k = 0; k < c.rows(); ++k) {
        d.col(k) = set.descriptors[static_cast<std::size_t>(k)].direction;
        w[k] = (set.descriptors[static_cast<std::size_t>(k)].position - p).squaredNorm() / (h * h) + 1e-10;
    }
    CHECK((d * c - Eigen::Matrix3d::Identity()).norm() < 1e-10);
    // KKT: W c lies in the row space of D.
    const Eigen::MatrixXd wc = w.asDiagonal() * c;
    const Eigen::MatrixXd lambda = (d * d.transpose()).ldlt().solve(d * wc);
    CHECK((wc - d.transpose() * lambda).norm() < 1e-8 * wc.norm());
}

TEST_CASE("load bases are linear in the moment") {
    const Mesh& mesh = head();
    const Vec3 p = interior_points()[0];
    const Vec3 q(1.5, -0.5, 2.0);
    for (auto m : {SourceModel::PartialIntegration, SourceModel::WhitneyMpo, SourceModel::Hdiv}) {
        const auto basis = rhs_basis(mesh, p, m);
        const auto direct = rhs(mesh, {p, q}, m).dense(mesh.num_vertices());
        const auto combined = basis.combine(q).dense(mesh.num_vertices());
        for (std::size_t i = 0; i < direct.size(); ++i) CHECK(direct[i] == doctest::Approx(combined[i]).epsilon(1e-12));
    }
}

TEST_CASE("infinite-medium potential matches the isotropic closed form and its gradient") {
    const Vec3 p(1.0, 2.0, -1.0), q(0.2, -0.4, 1.1), x(9.0, -3.0, 4.0);
    const double sigma = 0.33;
    const Vec3 r = x - p;
    const double expected = q.dot(r) / (4 * std::numbers::pi * sigma * 1e-3 * std::pow(r.norm(), 3));
    CHECK(infinite_medium_potential(sigma * Mat3::Identity(), p, q, x) == doctest::Approx(expected).epsilon(1e-13));

    Mat3 aniso;
    aniso << 0.5, 0.1, 0.0, 0.1, 0.3, 0.05, 0.0, 0.05, 0.9;
    const Vec3 grad = infinite_medium_gradient(aniso, p, q, x);
    const double h = 1e-4;
    for (int a = 0; a < 3; ++a) {
        const Vec3 dx = h * Vec3::Unit(a);
        const double fd = (infinite_medium_potential(aniso, p, q, x + dx) - infinite_medium_potential(aniso, p, q, x - dx)) / (2 * h);
        CHECK(grad[a] == doctest::Approx(fd).epsilon(1e-7));
    }
    // Odd in x - p.
    CHECK(infinite_medium_potential(aniso, p, q, 2 * p - x) == doctest::Approx(-infinite_medium_potential(aniso, p, q, x)));
    // Anisotropic potential solves div(sigma grad u) = 0 away from the source.
    const double lap_h = 1e-2;
    double div = 0.0;
    for (int a = 0; a < 3; ++a)
        div += (aniso.row(a).dot(infinite_medium_gradient(aniso, p, q, x + lap_h * Vec3::Unit(a))) -
                aniso.row(a).dot(infinite_medium_gradient(aniso, p, q, x - lap_h * Vec3::Unit(a)))) / (2 * lap_h);
    CHECK(std::abs(div) < 1e-6 * grad.norm());
    CHECK_THROWS_AS(infinite_medium_potential(aniso, p, q, p), InvalidInput);
    CHECK_THROWS_AS(infinite_medium_potential(-aniso, p, q, x), InvalidInput);
}

TEST_CASE("local subtraction basis is compatible and carries its patch") {
    const Mesh& mesh = head();
    const Vec3 p = interior_points()[0];
    CorrectionMeta meta;
    const auto basis = rhs_basis(mesh, p, SourceModel::LocalSubtraction, {}, &meta);
    CHECK(meta.source_element == mesh.locate(p).element);
    CHECK(std::is_sorted(meta.patch_vertices.begin(), meta.patch_vertices.end()));
    CHECK(meta.chi.size() == meta.patch_vertices.size());
    for (double c : meta.chi) CHECK((c >= 0.0 && c <= 1.0));
    for (int a = 0; a < 3; ++a) {
        const auto& b = basis.axis[static_cast<std::size_t>(a)];
        CHECK(b.max_abs() > 0.0);
        CHECK(std::abs(b.sum()) < 1e-9 * b.max_abs());
        for (const auto& [v, w] : b.entries)
            CHECK(std::binary_search(meta.patch_vertices.begin(), meta.patch_vertices.end(), v));
    }
    const int far = mesh.boundary_vertices().front();
    CHECK(meta.singular_at(far, Vec3(1, 0, 0)) == 0.0);
    CHECK_FALSE(meta.touches(std::vector<int>{far}));
    CHECK(meta.touches(std::vector<int>{meta.patch_vertices.front()}));
    // Larger patches contain smaller ones.
    LocalSubtractionOptions two;
    two.rings = 2;
    const auto big = rhs_local_subtraction_basis(mesh, p, two);
    CHECK(big.meta.patch_vertices.size() > meta.patch_vertices.size());
    CHECK(std::includes(big.meta.patch_vertices.begin(), big.meta.patch_vertices.end(), meta.patch_vertices.begin(),
                        meta.patch_vertices.end()));
}

TEST_CASE("local subtraction rejects bad options and near-vertex dipoles") {
    const Mesh& mesh = head();
    LocalSubtractionOptions zero;
    zero.rings = 0;
    CHECK_THROWS_AS(rhs_local_subtraction_basis(mesh, interior_points()[0], zero), InvalidInput);
    const int e = mesh.locate(interior_points()[0]).element;
    const Vec3 near = mesh.vertex(mesh.tet(e)[0]) + 1e-3 * (mesh.centroid(e) - mesh.vertex(mesh.tet(e)[0]));
    CHECK_THROWS_AS(rhs_local_subtraction_basis(mesh, near, {}), InvalidInput);
    CHECK_FALSE(has_vertex_clearance(mesh, near, 0.1));
    CHECK(has_vertex_clearance(mesh, mesh.centroid(e), 0.1));
    CHECK_FALSE(has_vertex_clearance(mesh, Vec3(0, 0, 200), 0.1));
    CHECK_THROWS_AS(local_subtraction_patch(mesh, interior_points()[0], zero), InvalidInput);
    CHECK_THROWS_AS(local_subtraction_patch(mesh, near, {}), InvalidInput);
    CHECK_THROWS_AS(local_subtraction_patch(mesh, Vec3(0, 0, 150), {}), OutsideMesh);
}

TEST_CASE("local subtraction patch equals the meta of the full basis") {
    const Mesh& mesh = head();
    for (const Vec3& p : interior_points()) {
        const auto patch = local_subtraction_patch(mesh, p);
        const auto full = rhs_local_subtraction_basis(mesh, p).meta;
        CHECK(patch.source_element == full.source_element);
        CHECK(patch.patch_elements == full.patch_elements);
        CHECK(patch.patch_vertices == full.patch_vertices);
        CHECK(patch.chi == full.chi);
        for (int a = 0; a < 3; ++a) CHECK(patch.singular_potential[a] == full.singular_potential[a]);
    }
}

TEST_CASE("dipoles outside the mesh are rejected") {
    for (auto m : {SourceModel::PartialIntegration, SourceModel::WhitneyPbo, SourceModel::Hdiv, SourceModel::LocalSubtraction})
        CHECK_THROWS_AS(rhs(head(), {Vec3(0, 0, 150), Vec3(1, 0, 0)}, m), OutsideMesh);
}
