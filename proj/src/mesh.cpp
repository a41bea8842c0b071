#include "fwdinv/mesh.hpp"

#include "fwdinv/textio.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

namespace fwdinv {

OutsideMesh::OutsideMesh(const Vec3& p)
    : Error("point (" + format_double(p.x()) + ", " + format_double(p.y()) + ", " +
            format_double(p.z()) + ") lies outside the mesh"),
      point(p) {}

bool is_spd(const Mat3& m, double symmetry_tol) {
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > symmetry_tol * std::max(1.0, m.cwiseAbs().maxCoeff())) {
        return false;
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(m, Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff() > 0.0;
}

// ---------------------------------------------------------------------------
// LayeredSphereSpec

LayeredSphereSpec LayeredSphereSpec::four_layer(int refinement) {
    LayeredSphereSpec spec;
    spec.radii = {78.0, 80.0, 86.0, 92.0};
    for (double s : {0.33, 1.79, 0.01, 0.43}) {
        spec.conductivity.push_back(s * Mat3::Identity());
    }
    spec.refinement = refinement;
    return spec;
}

LayeredSphereSpec LayeredSphereSpec::homogeneous(double radius, double sigma, int refinement) {
    LayeredSphereSpec spec;
    spec.radii = {radius};
    spec.conductivity = {sigma * Mat3::Identity()};
    spec.refinement = refinement;
    return spec;
}

void LayeredSphereSpec::validate() const {
    if (radii.empty()) {
        throw InvalidInput("layered sphere needs at least one layer");
    }
    if (radii.size() != conductivity.size()) {
        throw InvalidInput("layer radii and conductivity counts differ");
    }
    if (radii.front() <= 0.0) {
        throw InvalidInput("innermost radius must be positive");
    }
    for (std::size_t k = 1; k < radii.size(); ++k) {
        if (!(radii[k] > radii[k - 1])) {
            throw InvalidInput("layer radii must be strictly increasing (duplicate or reversed radius at layer " +
                               std::to_string(k) + ")");
        }
    }
    for (std::size_t k = 0; k < conductivity.size(); ++k) {
        if (!is_spd(conductivity[k])) {
            throw InvalidInput("conductivity tensor of layer " + std::to_string(k) + " is not SPD");
        }
    }
    if (refinement < 0) {
        throw InvalidInput("refinement level must be non-negative");
    }
}

Mat3 radial_tensor(const Vec3& radial_direction, double sigma_radial, double sigma_tangential) {
    const Vec3 n = radial_direction.normalized();
    Mat3 t = sigma_tangential * Mat3::Identity() + (sigma_radial - sigma_tangential) * (n * n.transpose());
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) t(j, i) = t(i, j);
    return t;
}

// ---------------------------------------------------------------------------
// Mesh

Mesh::Mesh(std::vector<Vec3> vertices, std::vector<Tet> tets, std::vector<int> labels,
           std::vector<Mat3> conductivity)
    : vertices_(std::move(vertices)),
      tets_(std::move(tets)),
      labels_(std::move(labels)),
      conductivity_(std::move(conductivity)) {
    if (labels_.size() != tets_.size() || conductivity_.size() != tets_.size()) {
        throw InvalidInput("mesh element arrays have inconsistent lengths");
    }
    for (const auto& t : tets_) {
        for (int v : t) {
            if (v < 0 || static_cast<std::size_t>(v) >= vertices_.size()) {
                throw InvalidInput("tetrahedron references a vertex out of range");
            }
        }
    }
    build_geometry();
    build_topology();
    build_locator();
}

void Mesh::build_geometry() {
    const std::size_t n = tets_.size();
    volumes_.resize(n);
    grads_.resize(n);
    for (std::size_t e = 0; e < n; ++e) {
        auto& t = tets_[e];
        Mat3 jac;
        jac.col(0) = vertices_[t[1]] - vertices_[t[0]];
        jac.col(1) = vertices_[t[2]] - vertices_[t[0]];
        jac.col(2) = vertices_[t[3]] - vertices_[t[0]];
        double det = jac.determinant();
        if (det < 0.0) {
            std::swap(t[2], t[3]);
            jac.col(1).swap(jac.col(2));
            det = -det;
        }
        if (!(det > 0.0)) {
            throw InvalidInput("degenerate tetrahedron " + std::to_string(e));
        }
        volumes_[e] = det / 6.0;
        // Rows of J^{-1} are the gradients of the barycentric coordinates 1..3.
        const Mat3 inv = jac.inverse();
        auto& g = grads_[e];
        g[1] = inv.row(0).transpose();
        g[2] = inv.row(1).transpose();
        g[3] = inv.row(2).transpose();
        g[0] = -(g[1] + g[2] + g[3]);
    }
}

void Mesh::build_topology() {
    const int n = static_cast<int>(tets_.size());
    struct FaceKey {
        std::array<int, 3> v;
        int elem;
        int local;
    };
    std::vector<FaceKey> faces;
    faces.reserve(4 * tets_.size());
    for (int e = 0; e < n; ++e) {
        for (int i = 0; i < 4; ++i) {
            std::array<int, 3> f{};
            int k = 0;
            for (int j = 0; j < 4; ++j) {
                if (j != i) f[k++] = tets_[e][j];
            }
            std::sort(f.begin(), f.end());
            faces.push_back({f, e, i});
        }
    }
    std::sort(faces.begin(), faces.end(), [](const FaceKey& a, const FaceKey& b) {
        return std::tie(a.v, a.elem) < std::tie(b.v, b.elem);
    });
    face_neighbors_.assign(tets_.size(), {-1, -1, -1, -1});
    for (std::size_t k = 0; k < faces.size();) {
        std::size_t m = k + 1;
        while (m < faces.size() && faces[m].v == faces[k].v) ++m;
        if (m - k == 2) {
            face_neighbors_[faces[k].elem][faces[k].local] = faces[k + 1].elem;
            face_neighbors_[faces[k + 1].elem][faces[k + 1].local] = faces[k].elem;
        } else if (m - k > 2) {
            throw InvalidInput("non-manifold mesh: a face is shared by more than two elements");
        }
        k = m;
    }

    vertex_elem_offsets_.assign(vertices_.size() + 1, 0);
    for (const auto& t : tets_) {
        for (int v : t) ++vertex_elem_offsets_[v + 1];
    }
    std::partial_sum(vertex_elem_offsets_.begin(), vertex_elem_offsets_.end(), vertex_elem_offsets_.begin());
    vertex_elem_list_.resize(vertex_elem_offsets_.back());
    std::vector<int> fill(vertex_elem_offsets_.begin(), vertex_elem_offsets_.end() - 1);
    for (int e = 0; e < n; ++e) {
        for (int v : tets_[e]) vertex_elem_list_[fill[v]++] = e;
    }
}

void Mesh::build_locator() {
    if (tets_.empty()) return;
    Vec3 lo = vertices_.front();
    Vec3 hi = lo;
    for (const auto& v : vertices_) {
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
    }
    double mean_edge = 0.0;
    const std::size_t stride = std::max<std::size_t>(1, tets_.size() / 512);
    std::size_t sampled = 0;
    for (std::size_t e = 0; e < tets_.size(); e += stride, ++sampled) {
        mean_edge += edge_length(static_cast<int>(e));
    }
    mean_edge /= static_cast<double>(sampled);
    bin_size_ = 1.5 * mean_edge;
    const double pad = 1e-9 * std::max(1.0, (hi - lo).norm());
    bin_origin_ = lo - Vec3::Constant(pad);
    for (int a = 0; a < 3; ++a) {
        bin_dims_[a] = std::max(1, static_cast<int>(std::ceil((hi[a] - lo[a] + 2 * pad) / bin_size_)));
    }
    const auto bin_range = [&](int e, std::array<int, 3>& b0, std::array<int, 3>& b1) {
        Vec3 elo = vertices_[tets_[e][0]];
        Vec3 ehi = elo;
        for (int j = 1; j < 4; ++j) {
            elo = elo.cwiseMin(vertices_[tets_[e][j]]);
            ehi = ehi.cwiseMax(vertices_[tets_[e][j]]);
        }
        for (int a = 0; a < 3; ++a) {
            b0[a] = std::clamp(static_cast<int>(std::floor((elo[a] - bin_origin_[a]) / bin_size_)), 0, bin_dims_[a] - 1);
            b1[a] = std::clamp(static_cast<int>(std::floor((ehi[a] - bin_origin_[a]) / bin_size_)), 0, bin_dims_[a] - 1);
        }
    };
    const std::size_t nbins = static_cast<std::size_t>(bin_dims_[0]) * bin_dims_[1] * bin_dims_[2];
    bin_offsets_.assign(nbins + 1, 0);
    const auto bin_index = [&](int x, int y, int z) {
        return (static_cast<std::size_t>(x) * bin_dims_[1] + y) * bin_dims_[2] + z;
    };
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<int> fill;
        if (pass == 1) {
            std::partial_sum(bin_offsets_.begin(), bin_offsets_.end(), bin_offsets_.begin());
            bin_elements_.resize(bin_offsets_.back());
            fill.assign(bin_offsets_.begin(), bin_offsets_.end() - 1);
        }
        for (int e = 0; e < static_cast<int>(tets_.size()); ++e) {
            std::array<int, 3> b0{}, b1{};
            bin_range(e, b0, b1);
            for (int x = b0[0]; x <= b1[0]; ++x)
                for (int y = b0[1]; y <= b1[1]; ++y)
                    for (int z = b0[2]; z <= b1[2]; ++z) {
                        if (pass == 0) {
                            ++bin_offsets_[bin_index(x, y, z) + 1];
                        } else {
                            bin_elements_[fill[bin_index(x, y, z)]++] = e;
                        }
                    }
        }
    }
}

Vec3 Mesh::centroid(int e) const {
    const auto& t = tets_[e];
    return 0.25 * (vertices_[t[0]] + vertices_[t[1]] + vertices_[t[2]] + vertices_[t[3]]);
}

double Mesh::edge_length(int e) const {
    const auto& t = tets_[e];
    double sum = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) sum += (vertices_[t[i]] - vertices_[t[j]]).norm();
    return sum / 6.0;
}

std::span<const int> Mesh::vertex_elements(int v) const {
    return {vertex_elem_list_.data() + vertex_elem_offsets_[v],
            static_cast<std::size_t>(vertex_elem_offsets_[v + 1] - vertex_elem_offsets_[v])};
}

std::array<double, 4> Mesh::barycentric(int e, const Vec3& p) const {
    const auto& t = tets_[e];
    const auto& g = grads_[e];
    const Vec3 d = p - vertices_[t[0]];
    std::array<double, 4> l{};
    l[1] = g[1].dot(d);
    l[2] = g[2].dot(d);
    l[3] = g[3].dot(d);
    l[0] = 1.0 - l[1] - l[2] - l[3];
    return l;
}

std::optional<Mesh::Location> Mesh::try_locate(const Vec3& p, double tol) const {
    if (tets_.empty()) return std::nullopt;
    std::array<int, 3> b{};
    for (int a = 0; a < 3; ++a) {
        const double f = std::floor((p[a] - bin_origin_[a]) / bin_size_);
        if (f < 0 || f >= bin_dims_[a]) return std::nullopt;
        b[a] = static_cast<int>(f);
    }
    const std::size_t bin = (static_cast<std::size_t>(b[0]) * bin_dims_[1] + b[1]) * bin_dims_[2] + b[2];
    for (int k = bin_offsets_[bin]; k < bin_offsets_[bin + 1]; ++k) {
        const int e = bin_elements_[k];
        const auto l = barycentric(e, p);
        if (l[0] >= -tol && l[1] >= -tol && l[2] >= -tol && l[3] >= -tol) {
            return Location{e, l};
        }
    }
    return std::nullopt;
}

Mesh::Location Mesh::locate(const Vec3& p, double tol) const {
    if (auto loc = try_locate(p, tol)) return *loc;
    throw OutsideMesh(p);
}

std::vector<int> Mesh::boundary_vertices() const {
    std::vector<char> on(vertices_.size(), 0);
    for (std::size_t e = 0; e < tets_.size(); ++e) {
        for (int i = 0; i < 4; ++i) {
            if (face_neighbors_[e][i] >= 0) continue;
            for (int j = 0; j < 4; ++j)
                if (j != i) on[tets_[e][j]] = 1;
        }
    }
    std::vector<int> out;
    for (std::size_t v = 0; v < on.size(); ++v)
        if (on[v]) out.push_back(static_cast<int>(v));
    return out;
}

Mesh Mesh::with_conductivity(std::vector<Mat3> conductivity) const {
    if (conductivity.size() != tets_.size()) {
        throw InvalidInput("conductivity count differs from element count");
    }
    Mesh copy = *this;
    copy.conductivity_ = std::move(conductivity);
    return copy;
}

Mesh Mesh::rotated(const Mat3& rotation) const {
    std::vector<Vec3> v(vertices_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = rotation * vertices_[i];
    std::vector<Mat3> s(conductivity_.size());
    for (std::size_t e = 0; e < s.size(); ++e) s[e] = rotation * conductivity_[e] * rotation.transpose();
    return Mesh(std::move(v), tets_, labels_, std::move(s));
}

void Mesh::write(std::ostream& os) const {
    os << "fwdinv-mesh 1\n";
    os << "vertices " << vertices_.size() << '\n';
    for (const auto& v : vertices_) {
        os << format_double(v.x()) << ' ' << format_double(v.y()) << ' ' << format_double(v.z()) << '\n';
    }
    os << "tetrahedra " << tets_.size() << '\n';
    for (const auto& t : tets_) {
        os << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
    }
    os << "labels " << labels_.size() << '\n';
    for (int l : labels_) os << l << '\n';
    os << "conductivity " << conductivity_.size() << '\n';
    for (const auto& s : conductivity_) {
        os << format_double(s(0, 0)) << ' ' << format_double(s(0, 1)) << ' ' << format_double(s(0, 2)) << ' '
           << format_double(s(1, 1)) << ' ' << format_double(s(1, 2)) << ' ' << format_double(s(2, 2)) << '\n';
    }
}

namespace {

std::size_t read_section_header(std::istream& is, const std::string& name) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("mesh file truncated before section '" + name + "'");
    std::istringstream ls(line);
    std::string tag;
    std::size_t count = 0;
    if (!(ls >> tag >> count) || tag != name) {
        throw FormatError("expected mesh section '" + name + "', got '" + line + "'");
    }
    return count;
}

std::vector<std::string_view> split_fields(const std::string& line) {
    std::vector<std::string_view> out;
    std::string_view sv(line);
    std::size_t pos = 0;
    while (pos < sv.size()) {
        while (pos < sv.size() && sv[pos] == ' ') ++pos;
        std::size_t end = sv.find(' ', pos);
        if (end == std::string_view::npos) end = sv.size();
        if (end > pos) out.push_back(sv.substr(pos, end - pos));
        pos = end;
    }
    return out;
}

std::vector<std::string_view> read_record(std::istream& is, std::string& line, std::size_t fields,
                                          const char* section) {
    if (!std::getline(is, line)) throw FormatError(std::string("mesh file truncated in section '") + section + "'");
    auto f = split_fields(line);
    if (f.size() != fields) {
        throw FormatError(std::string("malformed record in mesh section '") + section + "': '" + line + "'");
    }
    return f;
}

}  // namespace

Mesh Mesh::read(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "fwdinv-mesh 1") {
        throw FormatError("not a version-1 mesh file");
    }
    const std::size_t nv = read_section_header(is, "vertices");
    std::vector<Vec3> vertices(nv);
    for (auto& v : vertices) {
        auto f = read_record(is, line, 3, "vertices");
        v = Vec3(parse_double(f[0]), parse_double(f[1]), parse_double(f[2]));
    }
    const std::size_t nt = read_section_header(is, "tetrahedra");
    std::vector<Tet> tets(nt);
    for (auto& t : tets) {
        auto f = read_record(is, line, 4, "tetrahedra");
        for (int i = 0; i < 4; ++i) t[i] = parse_int(f[i]);
    }
    const std::size_t nl = read_section_header(is, "labels");
    std::vector<int> labels(nl);
    for (auto& l : labels) {
        auto f = read_record(is, line, 1, "labels");
        l = parse_int(f[0]);
    }
    const std::size_t nc = read_section_header(is, "conductivity");
    std::vector<Mat3> sigma(nc);
    for (auto& s : sigma) {
        auto f = read_record(is, line, 6, "conductivity");
        const double a = parse_double(f[0]), b = parse_double(f[1]), c = parse_double(f[2]);
        const double d = parse_double(f[3]), e = parse_double(f[4]), g = parse_double(f[5]);
        s << a, b, c, b, d, e, c, e, g;
    }
    return Mesh(std::move(vertices), std::move(tets), std::move(labels), std::move(sigma));
}

// ---------------------------------------------------------------------------
// Mesher

namespace {

// Number of grid shells assigned to each layer; every layer gets at least one.
std::vector<int> allocate_shells(const std::vector<double>& radii, int shells) {
    const int k = static_cast<int>(radii.size());
    if (shells < k) {
        throw InvalidInput("refinement too low: " + std::to_string(k) + " layers need at least " +
                           std::to_string(k) + " shells per half axis");
    }
    std::vector<int> n(k);
    int total = 0;
    for (int i = 0; i < k; ++i) {
        const double t = radii[i] - (i ? radii[i - 1] : 0.0);
        n[i] = std::max(1, static_cast<int>(std::lround(shells * t / radii.back())));
        total += n[i];
    }
    while (total != shells) {
        if (total > shells) {
            // Remove from the layer with the thinnest shells that can spare one.
            int best = -1;
            double best_t = 0.0;
            for (int i = 0; i < k; ++i) {
                if (n[i] <= 1) continue;
                const double t = (radii[i] - (i ? radii[i - 1] : 0.0)) / n[i];
                if (best < 0 || t < best_t) best = i, best_t = t;
            }
            --n[best];
            --total;
        } else {
            int best = 0;
            double best_t = -1.0;
            for (int i = 0; i < k; ++i) {
                const double t = (radii[i] - (i ? radii[i - 1] : 0.0)) / n[i];
                if (t > best_t) best = i, best_t = t;
            }
            ++n[best];
            ++total;
        }
    }
    return n;
}

}  // namespace

Mesh build_layered_sphere_mesh(const LayeredSphereSpec& spec) {
    spec.validate();
    const int half = 1 << (spec.refinement + 2);
    const std::size_t cells = static_cast<std::size_t>(2 * half) * (2 * half) * (2 * half);
    if (6 * cells > spec.element_cap) {
        throw InvalidInput("refinement " + std::to_string(spec.refinement) + " needs " + std::to_string(6 * cells) +
                           " elements, above the cap of " + std::to_string(spec.element_cap));
    }
    const auto counts = allocate_shells(spec.radii, half);
    std::vector<int> shell_break(counts.size() + 1, 0);  // shell index of each layer's outer boundary
    for (std::size_t k = 0; k < counts.size(); ++k) shell_break[k + 1] = shell_break[k] + counts[k];

    const auto radius_of_shell = [&](int s) {
        std::size_t k = 0;
        while (s > shell_break[k + 1]) ++k;
        const double r0 = k ? spec.radii[k - 1] : 0.0;
        const double r1 = spec.radii[k];
        if (s == shell_break[k + 1]) return r1;
        return r0 + (r1 - r0) * static_cast<double>(s - shell_break[k]) / counts[k];
    };
    const auto layer_of_shell = [&](int smax) {
        std::size_t k = 0;
        while (smax > shell_break[k + 1]) ++k;
        return static_cast<int>(k);
    };

    const int side = 2 * half + 1;
    const auto vid = [&](int i, int j, int k) { return ((i + half) * side + (j + half)) * side + (k + half); };
    std::vector<Vec3> vertices(static_cast<std::size_t>(side) * side * side);
    const double quarter_pi = std::numbers::pi / 4.0;
    for (int i = -half; i <= half; ++i)
        for (int j = -half; j <= half; ++j)
            for (int k = -half; k <= half; ++k) {
                const int s = std::max({std::abs(i), std::abs(j), std::abs(k)});
                Vec3 x = spec.center;
                if (s > 0) {
                    const Vec3 dir = Vec3(std::tan(quarter_pi * i / s), std::tan(quarter_pi * j / s),
                                          std::tan(quarter_pi * k / s))
                                         .normalized();
                    x += radius_of_shell(s) * dir;
                }
                vertices[vid(i, j, k)] = x;
            }

    // Kuhn subdivision into six tetrahedra, mirrored per octant; conforming across cells.
    static constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    std::vector<Mesh::Tet> tets;
    std::vector<int> labels;
    tets.reserve(6 * cells);
    labels.reserve(6 * cells);
    for (int i = -half; i < half; ++i)
        for (int j = -half; j < half; ++j)
            for (int k = -half; k < half; ++k) {
                const int smax = std::max({std::max(std::abs(i), std::abs(i + 1)),
                                           std::max(std::abs(j), std::abs(j + 1)),
                                           std::max(std::abs(k), std::abs(k + 1))});
                const int layer = layer_of_shell(smax);
                // Diagonal from the corner nearest the centre, so that every
                // tetrahedron keeps a vertex on the inner shell of the cell.
                const std::array<int, 3> lo{i, j, k};
                std::array<int, 3> start{}, step{};
                for (int d = 0; d < 3; ++d) {
                    start[d] = lo[d] < 0 ? lo[d] + 1 : lo[d];
                    step[d] = lo[d] < 0 ? -1 : 1;
                }
                for (const auto& p : perms) {
                    std::array<int, 3> c = start;
                    Mesh::Tet t{};
                    t[0] = vid(c[0], c[1], c[2]);
                    for (int n = 0; n < 3; ++n) {
                        c[p[n]] += step[p[n]];
                        t[n + 1] = vid(c[0], c[1], c[2]);
                    }
                    tets.push_back(t);
                    labels.push_back(layer);
                }
            }
    std::vector<Mat3> sigma(labels.size());
    for (std::size_t e = 0; e < labels.size(); ++e) sigma[e] = spec.conductivity[labels[e]];
    return Mesh(std::move(vertices), std::move(tets), std::move(labels), std::move(sigma));
}

Mesh apply_radial_anisotropy(const Mesh& mesh, int label, double isotropic_sigma, double tangential_to_radial_ratio,
                             const Vec3& center) {
    if (!(isotropic_sigma > 0.0) || !(tangential_to_radial_ratio > 0.0)) {
        throw InvalidInput("anisotropy parameters must be positive");
    }
    // sigma_r * sigma_t^2 = sigma^3 with sigma_t = ratio * sigma_r.
    const double sigma_r = isotropic_sigma / std::cbrt(tangential_to_radial_ratio * tangential_to_radial_ratio);
    const double sigma_t = tangential_to_radial_ratio * sigma_r;
    std::vector<Mat3> sigma = mesh.conductivity();
    for (std::size_t e = 0; e < sigma.size(); ++e) {
        if (mesh.label(static_cast<int>(e)) != label) continue;
        Vec3 n = mesh.centroid(static_cast<int>(e)) - center;
        if (n.norm() == 0.0) n = Vec3::UnitZ();
        sigma[e] = radial_tensor(n, sigma_r, sigma_t);
    }
    return mesh.with_conductivity(std::move(sigma));
}

// ---------------------------------------------------------------------------
// Surfaces

namespace {

SurfaceTriangulation collect_faces(const Mesh& mesh, const std::vector<std::pair<int, int>>& faces) {
    // faces: (element, local vertex opposite to the face)
    SurfaceTriangulation s;
    std::vector<int> used;
    for (auto [e, i] : faces)
        for (int j = 0; j < 4; ++j)
            if (j != i) used.push_back(mesh.tet(e)[j]);
    std::sort(used.begin(), used.end());
    used.erase(std::unique(used.begin(), used.end()), used.end());
    s.mesh_vertex = used;
    s.vertices.reserve(used.size());
    for (int v : used) s.vertices.push_back(mesh.vertex(v));
    const auto local = [&](int v) {
        return static_cast<int>(std::lower_bound(used.begin(), used.end(), v) - used.begin());
    };
    for (auto [e, i] : faces) {
        std::array<int, 3> f{};
        int k = 0;
        for (int j = 0; j < 4; ++j)
            if (j != i) f[k++] = mesh.tet(e)[j];
        const Vec3& a = mesh.vertex(f[0]);
        Vec3 n = (mesh.vertex(f[1]) - a).cross(mesh.vertex(f[2]) - a);
        if (n.dot(mesh.vertex(mesh.tet(e)[i]) - a) > 0.0) {
            std::swap(f[1], f[2]);
            n = -n;
        }
        s.triangles.push_back({local(f[0]), local(f[1]), local(f[2])});
        s.normals.push_back(n.normalized());
    }
    return s;
}

}  // namespace

bool SurfaceTriangulation::is_watertight() const {
    std::map<std::pair<int, int>, int> edges;
    for (const auto& t : triangles)
        for (int k = 0; k < 3; ++k) {
            const int a = t[k], b = t[(k + 1) % 3];
            ++edges[{std::min(a, b), std::max(a, b)}];
        }
    return std::all_of(edges.begin(), edges.end(), [](const auto& kv) { return kv.second == 2; });
}

int SurfaceTriangulation::euler_characteristic() const {
    std::map<std::pair<int, int>, int> edges;
    for (const auto& t : triangles)
        for (int k = 0; k < 3; ++k) {
            const int a = t[k], b = t[(k + 1) % 3];
            ++edges[{std::min(a, b), std::max(a, b)}];
        }
    return static_cast<int>(vertices.size()) - static_cast<int>(edges.size()) + static_cast<int>(triangles.size());
}

SurfaceTriangulation extract_interface_surface(const Mesh& mesh, int inner, int outer) {
    const auto& labels = mesh.labels();
    const bool has_inner = std::find(labels.begin(), labels.end(), inner) != labels.end();
    const bool has_outer = std::find(labels.begin(), labels.end(), outer) != labels.end();
    if (!has_inner || !has_outer) {
        throw InvalidInput("interface labels " + std::to_string(inner) + "/" + std::to_string(outer) +
                           " are not both present: empty surface");
    }
    std::vector<std::pair<int, int>> faces;
    for (int e = 0; e < static_cast<int>(mesh.num_elements()); ++e) {
        if (mesh.label(e) != inner) continue;
        for (int i = 0; i < 4; ++i) {
            const int n = mesh.face_neighbor(e, i);
            if (n >= 0 && mesh.label(n) == outer) faces.emplace_back(e, i);
        }
    }
    if (faces.empty()) {
        throw InvalidInput("labels " + std::to_string(inner) + " and " + std::to_string(outer) +
                           " share no faces: empty surface");
    }
    auto s = collect_faces(mesh, faces);
    if (!s.is_watertight()) throw InvalidInput("interface surface is open");
    return s;
}

SurfaceTriangulation extract_boundary_surface(const Mesh& mesh) {
    std::vector<std::pair<int, int>> faces;
    for (int e = 0; e < static_cast<int>(mesh.num_elements()); ++e)
        for (int i = 0; i < 4; ++i)
            if (mesh.face_neighbor(e, i) < 0) faces.emplace_back(e, i);
    if (faces.empty()) throw InvalidInput("mesh has no boundary faces");
    return collect_faces(mesh, faces);
}

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    // Closest point by Voronoi-region classification (Ericson, Real-Time Collision Detection 5.1.5).
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return ap.norm();
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return bp.norm();
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        const double v = d1 / (d1 - d3);
        return (p - (a + v * ab)).norm();
    }
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return cp.norm();
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        const double w = d2 / (d2 - d6);
        return (p - (a + w * ac)).norm();
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + w * (c - b))).norm();
    }
    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom, w = vc * denom;
    return (p - (a + ab * v + ac * w)).norm();
}

SurfaceDistance::SurfaceDistance(SurfaceTriangulation surface) : surface_(std::move(surface)) {
    if (surface_.empty()) throw InvalidInput("distance query against an empty surface");
    centers_.reserve(surface_.triangles.size());
    radii_.reserve(surface_.triangles.size());
    for (const auto& t : surface_.triangles) {
        const Vec3 c = (surface_.vertices[t[0]] + surface_.vertices[t[1]] + surface_.vertices[t[2]]) / 3.0;
        double r = 0.0;
        for (int v : t) r = std::max(r, (surface_.vertices[v] - c).norm());
        centers_.push_back(c);
        radii_.push_back(r);
    }
}

double SurfaceDistance::operator()(const Vec3& p) const {
    const std::size_t n = centers_.size();
    std::vector<std::pair<double, int>> bound(n);
    for (std::size_t t = 0; t < n; ++t) {
        bound[t] = {std::max(0.0, (p - centers_[t]).norm() - radii_[t]), static_cast<int>(t)};
    }
    std::sort(bound.begin(), bound.end());
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [lb, t] : bound) {
        if (lb >= best) break;
        const auto& tri = surface_.triangles[t];
        best = std::min(best, point_triangle_distance(p, surface_.vertices[tri[0]], surface_.vertices[tri[1]],
                                                      surface_.vertices[tri[2]]));
    }
    return best;
}

double depth_from_surface(const Vec3& p, const SurfaceTriangulation& surface) {
    return SurfaceDistance(surface)(p);
}

}  // namespace fwdinv
