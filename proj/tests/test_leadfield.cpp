#include "fwdinv/leadfield.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace fwdinv;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    Mesh mesh = build_layered_sphere_mesh(LayeredSphereSpec::four_layer(1));
    StiffnessMatrix a = assemble_stiffness(mesh);
    ElectrodeSet electrodes;
    TransferMatrix transfer;
    SourceSpace space;

    Fixture() {
        const auto pos = cap_electrode_positions(16, 100.0, 92.0);
        electrodes = attach_electrodes(mesh, pos);
        SolverOptions opt;
        opt.tol = 1e-10;
        opt.preconditioner = Preconditioner::IncompleteCholesky;
        transfer = compute_transfer_matrix(a, electrodes, opt);
        space.positions = {{13.1, -7.3, 21.7}, {-30.2, 17.9, 5.3}, {2.6, 41.4, -33.8}, {0.7, 1.9, 60.3}};
        space.depth_mm = {1, 2, 3, 4};
        space.relheight_mm = {5, 6, 7, 8};
    }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

fs::path temp_dir() {
    const auto dir = fs::temp_directory_path() / "fwdinv_test_leadfield";
    fs::create_directories(dir);
    return dir;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("lead field columns are transfer-matrix readouts of the model loads") {
    const auto& f = fixture();
    for (auto model : {SourceModel::PartialIntegration, SourceModel::WhitneyPbo, SourceModel::WhitneyMpo,
                       SourceModel::Hdiv, SourceModel::LocalSubtraction}) {
        const auto lf = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, model, "isotropic");
        REQUIRE(lf.num_sources() == f.space.size());
        REQUIRE(lf.num_electrodes() == 16);
        CHECK(lf.model == model);
        for (std::size_t j = 0; j < f.space.size(); ++j) {
            const auto basis = rhs_basis(f.mesh, f.space.positions[j], model);
            for (int a = 0; a < 3; ++a) {
                const auto b = basis.axis[static_cast<std::size_t>(a)].dense(f.mesh.num_vertices());
                const VectorX expected = f.transfer.readout(b);
                const VectorX got = lf.matrix.col(static_cast<Eigen::Index>(3 * j) + a);
                CHECK((got - expected).norm() <= 1e-12 * expected.norm());
                // Average reference: columns sum to zero.
                CHECK(std::abs(got.sum()) <= 1e-12 * got.norm());
            }
        }
    }
}

TEST_CASE("lead field agrees with direct forward solves") {
    const auto& f = fixture();
    const auto lf = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, SourceModel::Hdiv, "isotropic");
    const Vec3 q(0.4, -1.0, 0.7);
    for (std::size_t j = 0; j < f.space.size(); ++j) {
        const auto b = rhs(f.mesh, {f.space.positions[j], q}, SourceModel::Hdiv).dense(f.mesh.num_vertices());
        const VectorX direct = electrode_readout(solve_spd(f.a, b, 1e-12), f.electrodes);
        const VectorX via = lf.block(j) * q;
        CHECK((via - direct).norm() <= 1e-6 * direct.norm());
    }
}

TEST_CASE("lead field build is independent of the thread count") {
    const auto& f = fixture();
    LeadFieldOptions one, many;
    many.threads = 4;
    const auto a = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, SourceModel::WhitneyMpo, "isotropic", one);
    const auto b = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, SourceModel::WhitneyMpo, "isotropic", many);
    CHECK(a.matrix == b.matrix);
}

TEST_CASE("lead field build validates shapes and reports every failing source") {
    const auto& f = fixture();
    TransferMatrix wrong = f.transfer;
    wrong.data.conservativeResize(wrong.data.rows() - 1, Eigen::NoChange);
    CHECK_THROWS_AS(build_leadfield(f.mesh, wrong, f.electrodes, f.space, SourceModel::Hdiv, "isotropic"), InvalidInput);
    SourceSpace ragged = f.space;
    ragged.depth_mm.pop_back();
    CHECK_THROWS_AS(build_leadfield(f.mesh, f.transfer, f.electrodes, ragged, SourceModel::Hdiv, "isotropic"), InvalidInput);

    SourceSpace bad = f.space;
    bad.positions[1] = Vec3(0, 0, 150);
    bad.positions[3] = Vec3(150, 0, 0);
    try {
        build_leadfield(f.mesh, f.transfer, f.electrodes, bad, SourceModel::PartialIntegration, "isotropic");
        FAIL("expected LeadFieldBuildError");
    } catch (const LeadFieldBuildError& ex) {
        CHECK(ex.failed_sources == std::vector<std::size_t>{1, 3});
    }

    // A source right under an electrode puts that vertex in the subtraction patch.
    SourceSpace shallow = f.space;
    const Vec3 e = f.mesh.vertex(f.electrodes.vertices[0]);
    shallow.positions[2] = 0.97 * e + Vec3(0.31, -0.17, 0.0);
    CHECK_THROWS_AS(build_leadfield(f.mesh, f.transfer, f.electrodes, shallow, SourceModel::LocalSubtraction, "isotropic"),
                    LeadFieldBuildError);
}

TEST_CASE("column norm map and nearest-rank quantiles") {
    const auto& f = fixture();
    const auto lf = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, SourceModel::PartialIntegration, "isotropic");
    const auto norms = column_norm_map(lf);
    REQUIRE(norms.size() == f.space.size());
    for (std::size_t j = 0; j < norms.size(); ++j) CHECK(norms[j] == doctest::Approx(lf.block(j).norm()));

    std::vector<double> v{7, 3, 10, 1, 2, 9, 4, 8, 6, 5};
    CHECK(nearest_rank_quantile(v, 0.9) == 9);
    CHECK(nearest_rank_quantile(v, 0.95) == 10);
    CHECK(nearest_rank_quantile(v, 0.1) == 1);
    CHECK(nearest_rank_quantile(v, 0.11) == 2);
    CHECK(nearest_rank_quantile(v, 1.0) == 10);
    CHECK_THROWS_AS(nearest_rank_quantile({}, 0.5), InvalidInput);
    CHECK_THROWS_AS(nearest_rank_quantile(v, 0.0), InvalidInput);
    CHECK_THROWS_AS(nearest_rank_quantile(v, 1.5), InvalidInput);
    const auto clipped = quantile_clip(v, 0.8);
    CHECK(clipped == std::vector<double>{7, 3, 8, 1, 2, 8, 4, 8, 6, 5});
}

TEST_CASE("source-space CSV round-trips and annotates depths") {
    const auto dir = temp_dir();
    SourceSpace s;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-70, 70);
    for (int i = 0; i < 25; ++i) {
        s.positions.emplace_back(u(rng), u(rng), u(rng));
        s.depth_mm.push_back(u(rng));
        s.relheight_mm.push_back(u(rng));
    }
    save_source_space(s, dir / "s.csv");
    CHECK(load_source_space(dir / "s.csv") == s);
    const auto text = read_bytes(dir / "s.csv");
    CHECK(text.rfind("index,x,y,z,depth_mm,relheight_mm\n", 0) == 0);

    write_bytes(dir / "bad.csv", "i,x,y,z\n0,1,2,3\n");
    CHECK_THROWS_AS(load_source_space(dir / "bad.csv"), FormatError);
    write_bytes(dir / "order.csv", "index,x,y,z,depth_mm,relheight_mm\n1,0,0,0,0,0\n");
    CHECK_THROWS_AS(load_source_space(dir / "order.csv"), FormatError);
    write_bytes(dir / "short.csv", "index,x,y,z,depth_mm,relheight_mm\n0,0,0,0,0\n");
    CHECK_THROWS_AS(load_source_space(dir / "short.csv"), FormatError);

    const auto& f = fixture();
    const auto skull = extract_interface_surface(f.mesh, 1, 2);
    const SurfaceDistance dist(skull);
    SourceSpace a = f.space;
    annotate_source_space(a, dist, -20.0);
    for (std::size_t j = 0; j < a.size(); ++j) {
        CHECK(a.depth_mm[j] == doctest::Approx(dist(a.positions[j])));
        CHECK(a.relheight_mm[j] == doctest::Approx(a.positions[j].z() + 20.0));
    }
}

TEST_CASE("LEAD files round-trip bit-exactly and reject corruption") {
    const auto& f = fixture();
    const auto dir = temp_dir();
    const auto lf = build_leadfield(f.mesh, f.transfer, f.electrodes, f.space, SourceModel::WhitneyPbo, "anisotropic");
    const auto path = dir / "lf.lead";
    save_leadfield(lf, path);
    CHECK(source_space_sidecar(path) == dir / "lf.sources.csv");
    CHECK(fs::exists(dir / "lf.sources.csv"));
    const auto back = load_leadfield(path);
    CHECK(back.matrix == lf.matrix);
    CHECK(back.model == lf.model);
    CHECK(back.conductivity == "anisotropic");
    CHECK(back.space == lf.space);

    const std::string bytes = read_bytes(path);
    CHECK(bytes.size() == 4 + 4 + 8 + 8 + 16 + 16 + 8 * 16 * 3 * f.space.size());
    CHECK(bytes.substr(0, 4) == "LEAD");
    CHECK(bytes.substr(24, 11) == "whitney-pbo");
    CHECK(bytes[35] == '\0');

    auto corrupt = [&](const std::string& b) {
        write_bytes(path, b);
        CHECK_THROWS_AS(load_leadfield(path), FormatError);
    };
    std::string m = bytes;
    m[0] = 'X';
    corrupt(m);
    m = bytes;
    m[4] = 2;
    corrupt(m);
    corrupt(bytes.substr(0, bytes.size() - 8));
    corrupt(bytes + "x");
    m = bytes;
    m.replace(24, 11, "nonexistent");
    corrupt(m);

    write_bytes(path, bytes);
    SourceSpace fewer = lf.space;
    fewer.positions.pop_back();
    fewer.depth_mm.pop_back();
    fewer.relheight_mm.pop_back();
    save_source_space(fewer, source_space_sidecar(path));
    CHECK_THROWS_AS(load_leadfield(path), FormatError);

    LeadField mismatched = lf;
    mismatched.space = fewer;
    CHECK_THROWS_AS(save_leadfield(mismatched, dir / "m.lead"), InvalidInput);
}
