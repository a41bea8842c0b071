#include "fwdinv/mesh.hpp"

#include "oracles/geometry.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

using namespace fwdinv;

namespace {

const Mesh& four_layer_r1() {
    static const Mesh mesh = build_layered_sphere_mesh(LayeredSphereSpec::four_layer(1));
    return mesh;
}

Vec3 random_in_ball(std::mt19937_64& rng, double r) {
    std::uniform_real_distribution<double> u(-r, r);
    for (;;) {
        Vec3 p(u(rng), u(rng), u(rng));
        if (p.norm() < r) return p;
    }
}

}  // namespace

TEST_CASE("refinement 0 has 729 vertices and 3072 elements") {
    const Mesh mesh = build_layered_sphere_mesh(LayeredSphereSpec::homogeneous(90.0, 0.33, 0));
    CHECK(mesh.num_vertices() == 729);
    CHECK(mesh.num_elements() == 3072);
}

TEST_CASE("element cap is enforced") {
    auto spec = LayeredSphereSpec::four_layer(2);
    spec.element_cap = 1000;
    CHECK_THROWS_AS(build_layered_sphere_mesh(spec), InvalidInput);
}

TEST_CASE("spec validation") {
    auto spec = LayeredSphereSpec::four_layer(0);
    spec.radii = {80.0, 78.0, 86.0, 92.0};
    CHECK_THROWS_AS(spec.validate(), InvalidInput);
    spec = LayeredSphereSpec::four_layer(0);
    spec.conductivity[1] = -Mat3::Identity();
    CHECK_THROWS_AS(spec.validate(), InvalidInput);
    spec = LayeredSphereSpec::four_layer(0);
    spec.conductivity.pop_back();
    CHECK_THROWS_AS(spec.validate(), InvalidInput);
}

TEST_CASE("elements are positively oriented with bounded quality and fill the ball") {
    const Mesh& mesh = four_layer_r1();
    double total = 0.0;
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
        CHECK(mesh.volume(static_cast<int>(e)) > 0.0);
        total += mesh.volume(static_cast<int>(e));
    }
    const double ball = 4.0 / 3.0 * std::numbers::pi * std::pow(92.0, 3);
    CHECK(total < ball);
    CHECK(total > 0.95 * ball);
}

TEST_CASE("layer interfaces lie on their spheres") {
    const Mesh& mesh = four_layer_r1();
    const std::vector<double> radii{78.0, 80.0, 86.0, 92.0};
    for (int inner = 0; inner < 3; ++inner) {
        const auto s = extract_interface_surface(mesh, inner, inner + 1);
        REQUIRE_FALSE(s.empty());
        CHECK(s.is_watertight());
        CHECK(s.euler_characteristic() == 2);
        for (const auto& v : s.vertices) CHECK(v.norm() == doctest::Approx(radii[inner]).epsilon(1e-12));
        // Normals point outward (from inner to outer).
        for (std::size_t t = 0; t < s.triangles.size(); ++t) {
            const Vec3 c = (s.vertices[s.triangles[t][0]] + s.vertices[s.triangles[t][1]] + s.vertices[s.triangles[t][2]]) / 3.0;
            CHECK(s.normals[t].dot(c) > 0.0);
        }
    }
    const auto outer = extract_boundary_surface(mesh);
    CHECK(outer.is_watertight());
    CHECK(outer.euler_characteristic() == 2);
    for (const auto& v : outer.vertices) CHECK(v.norm() == doctest::Approx(92.0).epsilon(1e-12));
}

TEST_CASE("labels follow the radial shells") {
    const Mesh& mesh = four_layer_r1();
    const std::vector<double> radii{78.0, 80.0, 86.0, 92.0};
    for (std::size_t e = 0; e < mesh.num_elements(); ++e) {
        const int l = mesh.label(static_cast<int>(e));
        const double r = mesh.centroid(static_cast<int>(e)).norm();
        CHECK(r < radii[static_cast<std::size_t>(l)] + 1e-9);
        if (l > 0) CHECK(r > radii[static_cast<std::size_t>(l) - 1] - 4.0);
    }
}

TEST_CASE("point location matches a brute-force element scan") {
    const Mesh& mesh = four_layer_r1();
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        const Vec3 p = random_in_ball(rng, 91.0);
        const int expected = oracle::locate_scan(mesh, p);
        const auto loc = mesh.try_locate(p);
        REQUIRE(expected >= 0);
        REQUIRE(loc.has_value());
        CHECK(loc->element == expected);
        double sum = 0.0;
        Vec3 back = Vec3::Zero();
        for (int k = 0; k < 4; ++k) {
            sum += loc->bary[static_cast<std::size_t>(k)];
            back += loc->bary[static_cast<std::size_t>(k)] * mesh.vertex(mesh.tet(loc->element)[static_cast<std::size_t>(k)]);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK((back - p).norm() < 1e-9);
    }
    CHECK_FALSE(mesh.try_locate(Vec3(0, 0, 95.0)).has_value());
    CHECK_THROWS_AS(mesh.locate(Vec3(100.0, 0, 0)), OutsideMesh);
}

TEST_CASE("face adjacency matches sorted face keys") {
    const Mesh& mesh = four_layer_r1();
    const auto expected = oracle::face_adjacency(mesh);
    for (std::size_t e = 0; e < mesh.num_elements(); ++e)
        for (int i = 0; i < 4; ++i) CHECK(mesh.face_neighbor(static_cast<int>(e), i) == expected[e][static_cast<std::size_t>(i)]);
}

TEST_CASE("vertex-element incidence is complete and ascending") {
    const Mesh& mesh = four_layer_r1();
    std::vector<std::vector<int>> expected(mesh.num_vertices());
    for (std::size_t e = 0; e < mesh.num_elements(); ++e)
        for (int v : mesh.tet(static_cast<int>(e))) expected[static_cast<std::size_t>(v)].push_back(static_cast<int>(e));
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
        const auto span = mesh.vertex_elements(static_cast<int>(v));
        CHECK(std::vector<int>(span.begin(), span.end()) == expected[v]);
    }
}

TEST_CASE("barycentric gradients sum to zero and reproduce linear functions") {
    const Mesh& mesh = four_layer_r1();
    for (int e = 0; e < static_cast<int>(mesh.num_elements()); e += 97) {
        const auto& g = mesh.grads(e);
        CHECK((g[0] + g[1] + g[2] + g[3]).norm() < 1e-12);
        // sum_i x_i grad(phi_i) = I
        Mat3 m = Mat3::Zero();
        for (int i = 0; i < 4; ++i) m += mesh.vertex(mesh.tet(e)[static_cast<std::size_t>(i)]) * g[static_cast<std::size_t>(i)].transpose();
        CHECK((m - Mat3::Identity()).norm() < 1e-10);
    }
}

TEST_CASE("surface distance matches a brute-force triangle scan") {
    const Mesh& mesh = four_layer_r1();
    const auto surface = extract_interface_surface(mesh, 1, 2);
    const SurfaceDistance dist(surface);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        const Vec3 p = random_in_ball(rng, 100.0);
        const double expected = oracle::surface_distance_scan(surface, p);
        CHECK(dist(p) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(depth_from_surface(p, surface) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("point-triangle distance regions") {
    const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
    CHECK(point_triangle_distance(Vec3(0.2, 0.2, 3.0), a, b, c) == doctest::Approx(3.0));
    CHECK(point_triangle_distance(Vec3(-1, -1, 0), a, b, c) == doctest::Approx(std::sqrt(2.0)));
    CHECK(point_triangle_distance(Vec3(0.5, -2, 0), a, b, c) == doctest::Approx(2.0));
    CHECK(point_triangle_distance(Vec3(1, 1, 0), a, b, c) == doctest::Approx(std::sqrt(0.5)));
}

TEST_CASE("mesh text format round-trips exactly") {
    const Mesh mesh = apply_radial_anisotropy(build_layered_sphere_mesh(LayeredSphereSpec::four_layer(0)), 0, 0.33, 2.0);
    std::stringstream ss;
    mesh.write(ss);
    const Mesh back = Mesh::read(ss);
    CHECK(back.vertices() == mesh.vertices());
    CHECK(back.tets() == mesh.tets());
    CHECK(back.labels() == mesh.labels());
    CHECK(back.conductivity() == mesh.conductivity());
    std::stringstream again;
    back.write(again);
    std::stringstream first;
    mesh.write(first);
    CHECK(again.str() == first.str());
}

TEST_CASE("malformed mesh text is rejected") {
    std::stringstream bad("vertices 2\n0 0 0\n");
    CHECK_THROWS_AS(Mesh::read(bad), FormatError);
    std::stringstream junk("hello\n");
    CHECK_THROWS_AS(Mesh::read(junk), FormatError);
}

TEST_CASE("radial anisotropy keeps the geometric mean and the radial eigenvector") {
    const Mesh iso = build_layered_sphere_mesh(LayeredSphereSpec::four_layer(0));
    const Mesh an = apply_radial_anisotropy(iso, 0, 0.33, 2.0);
    for (int e = 0; e < static_cast<int>(an.num_elements()); ++e) {
        if (an.label(e) != 0) {
            CHECK(an.sigma(e) == iso.sigma(e));
            continue;
        }
        const Mat3& s = an.sigma(e);
        CHECK(is_spd(s));
        CHECK(std::cbrt(s.determinant()) == doctest::Approx(0.33).epsilon(1e-12));
        const Vec3 n = an.centroid(e).normalized();
        const double radial = n.dot(s * n);
        CHECK((s * n - radial * n).norm() < 1e-12);
        CHECK(s.trace() - radial == doctest::Approx(2.0 * 2.0 * radial).epsilon(1e-12));
    }
}

TEST_CASE("radial_tensor") {
    const Mat3 t = radial_tensor(Vec3(0, 0, 2), 1.0, 3.0);
    CHECK((t - Vec3(3, 3, 1).asDiagonal().toDenseMatrix()).norm() < 1e-15);
}

TEST_CASE("rotation preserves volumes and location") {
    const Mesh& mesh = four_layer_r1();
    const Mat3 r = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
    const Mesh rot = mesh.rotated(r);
    for (int e = 0; e < static_cast<int>(mesh.num_elements()); e += 53)
        CHECK(rot.volume(e) == doctest::Approx(mesh.volume(e)).epsilon(1e-12));
    const Vec3 p(12.0, -30.0, 41.0);
    CHECK(rot.locate(r * p).element == mesh.locate(p).element);
}

TEST_CASE("boundary vertices are the outer sphere") {
    const Mesh& mesh = four_layer_r1();
    const auto b = mesh.boundary_vertices();
    REQUIRE_FALSE(b.empty());
    CHECK(std::is_sorted(b.begin(), b.end()));
    for (int v : b) CHECK(mesh.vertex(v).norm() == doctest::Approx(92.0).epsilon(1e-12));
}
