#include "fwdinv/leadfield.hpp"

#include "fwdinv/binio.hpp"
#include "fwdinv/parallel.hpp"
#include "fwdinv/textio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fwdinv {

void SourceSpace::validate() const {
    if (depth_mm.size() != positions.size() || relheight_mm.size() != positions.size()) {
        throw InvalidInput("source space columns have different lengths");
    }
}

namespace {

constexpr const char* kSourceHeader = "index,x,y,z,depth_mm,relheight_mm";

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace

void save_source_space(const SourceSpace& space, const std::filesystem::path& path) {
    space.validate();
    std::ofstream os(path);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    os << kSourceHeader << '\n';
    for (std::size_t j = 0; j < space.size(); ++j) {
        const Vec3& p = space.positions[j];
        os << j << ',' << format_double(p.x()) << ',' << format_double(p.y()) << ',' << format_double(p.z()) << ','
           << format_double(space.depth_mm[j]) << ',' << format_double(space.relheight_mm[j]) << '\n';
    }
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

SourceSpace load_source_space(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(is, line) || trim(line) != kSourceHeader) {
        throw FormatError("source-space CSV '" + path.string() + "' lacks the expected header");
    }
    SourceSpace space;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (trim(line).empty()) continue;
        const auto f = split_commas(line);
        if (f.size() != 6) throw FormatError("source-space row " + std::to_string(row) + " has " +
                                             std::to_string(f.size()) + " fields, expected 6");
        if (parse_u64(trim(f[0])) != row) throw FormatError("source-space row " + std::to_string(row) + " out of order");
        space.positions.emplace_back(parse_double(trim(f[1])), parse_double(trim(f[2])), parse_double(trim(f[3])));
        space.depth_mm.push_back(parse_double(trim(f[4])));
        space.relheight_mm.push_back(parse_double(trim(f[5])));
        ++row;
    }
    return space;
}

void annotate_source_space(SourceSpace& space, const SurfaceDistance& inner_skull, double lowest_electrode_z) {
    space.depth_mm.resize(space.size());
    space.relheight_mm.resize(space.size());
    for (std::size_t j = 0; j < space.size(); ++j) {
        space.depth_mm[j] = inner_skull(space.positions[j]);
        space.relheight_mm[j] = space.positions[j].z() - lowest_electrode_z;
    }
}

LeadField build_leadfield(const Mesh& mesh, const TransferMatrix& transfer, const ElectrodeSet& electrodes,
                          const SourceSpace& space, SourceModel model, const std::string& conductivity,
                          const LeadFieldOptions& options) {
    space.validate();
    if (static_cast<std::size_t>(transfer.data.rows()) != mesh.num_vertices()) {
        throw InvalidInput("transfer matrix has " + std::to_string(transfer.data.rows()) + " rows but the mesh has " +
                           std::to_string(mesh.num_vertices()) + " vertices");
    }
    if (static_cast<std::size_t>(transfer.data.cols()) != electrodes.size()) {
        throw InvalidInput("transfer matrix and electrode set disagree on the electrode count");
    }
    const auto m = transfer.data.cols();
    // Rows of T become contiguous columns here.
    const MatrixX tt = transfer.data.transpose();
    std::vector<int> electrode_vertices = electrodes.vertices;
    std::sort(electrode_vertices.begin(), electrode_vertices.end());

    LeadField lf;
    lf.model = model;
    lf.conductivity = conductivity;
    lf.space = space;
    lf.matrix = MatrixX::Zero(m, static_cast<Eigen::Index>(3 * space.size()));

    std::vector<std::string> errors(space.size());
    parallel_for(space.size(), options.threads, [&](std::size_t j) {
        try {
            CorrectionMeta meta;
            const LoadBasis basis =
                rhs_basis(mesh, space.positions[j], model, options.local_subtraction, &meta);
            if (model == SourceModel::LocalSubtraction && meta.touches(electrode_vertices)) {
                throw InvalidInput("local-subtraction patch touches an electrode vertex");
            }
            for (int a = 0; a < 3; ++a) {
                VectorX col = VectorX::Zero(m);
                for (const auto& [v, x] : basis.axis[a].entries) col.noalias() += x * tt.col(v);
                lf.matrix.col(static_cast<Eigen::Index>(3 * j + a)) = col;
            }
        } catch (const std::exception& ex) {
            errors[j] = ex.what();
        }
    });
    std::vector<std::size_t> failed;
    std::ostringstream msg;
    for (std::size_t j = 0; j < errors.size(); ++j) {
        if (errors[j].empty()) continue;
        if (failed.size() < 10) msg << "\n  source " << j << ": " << errors[j];
        failed.push_back(j);
    }
    if (!failed.empty()) {
        throw LeadFieldBuildError("lead field build failed for " + std::to_string(failed.size()) + " of " +
                                      std::to_string(space.size()) + " sources:" + msg.str(),
                                  std::move(failed));
    }
    return lf;
}

std::vector<double> column_norm_map(const LeadField& lf) {
    std::vector<double> out(lf.num_sources());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = lf.block(j).norm();
    return out;
}

double nearest_rank_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw InvalidInput("quantile of an empty field");
    if (!(q > 0.0 && q <= 1.0)) throw InvalidInput("quantile fraction must lie in (0, 1]");
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return values[rank - 1];
}

std::vector<double> quantile_clip(std::vector<double> field, double q) {
    const double cap = nearest_rank_quantile(field, q);
    for (double& v : field) v = std::min(v, cap);
    return field;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr char kLeadMagic[4] = {'L', 'E', 'A', 'D'};
constexpr std::uint32_t kLeadVersion = 1;
constexpr std::size_t kTagBytes = 16;

}  // namespace

std::filesystem::path source_space_sidecar(const std::filesystem::path& leadfield_path) {
    auto p = leadfield_path;
    p.replace_extension(".sources.csv");
    return p;
}

void save_leadfield(const LeadField& lf, const std::filesystem::path& path) {
    if (lf.num_sources() != lf.space.size()) {
        throw InvalidInput("lead field has " + std::to_string(lf.num_sources()) + " sources but its space has " +
                           std::to_string(lf.space.size()));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    binio::put_bytes(os, kLeadMagic, 4);
    binio::put(os, kLeadVersion);
    binio::put(os, static_cast<std::uint64_t>(lf.num_electrodes()));
    binio::put(os, static_cast<std::uint64_t>(lf.num_sources()));
    binio::put_tag<kTagBytes>(os, to_string(lf.model));
    binio::put_tag<kTagBytes>(os, lf.conductivity);
    binio::put_bytes(os, lf.matrix.data(), sizeof(double) * static_cast<std::size_t>(lf.matrix.size()));
    if (!os) throw Error("write failed for '" + path.string() + "'");
    os.close();
    save_source_space(lf.space, source_space_sidecar(path));
}

LeadField load_leadfield(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    char magic[4];
    binio::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, kLeadMagic, 4) != 0) throw FormatError("not a lead-field file (bad magic)");
    const auto version = binio::get<std::uint32_t>(is, "version");
    if (version != kLeadVersion) throw FormatError("unsupported lead-field version " + std::to_string(version));
    const auto electrodes = binio::get<std::uint64_t>(is, "electrode count");
    const auto sources = binio::get<std::uint64_t>(is, "source count");
    LeadField lf;
    try {
        lf.model = parse_source_model(binio::get_tag<kTagBytes>(is, "model tag"));
    } catch (const InvalidInput& ex) {
        throw FormatError(ex.what());
    }
    lf.conductivity = binio::get_tag<kTagBytes>(is, "conductivity tag");
    lf.matrix.resize(static_cast<Eigen::Index>(electrodes), static_cast<Eigen::Index>(3 * sources));
    binio::get_bytes(is, lf.matrix.data(), sizeof(double) * electrodes * 3 * sources, "matrix data");
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after lead field");
    lf.space = load_source_space(source_space_sidecar(path));
    if (lf.space.size() != sources) {
        throw FormatError("lead field holds " + std::to_string(sources) + " sources but the sidecar lists " +
                          std::to_string(lf.space.size()));
    }
    return lf;
}

}  // namespace fwdinv
