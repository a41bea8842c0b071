#include "fwdinv/source_models.hpp"

#include "fwdinv/fem.hpp"
#include "fwdinv/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace fwdinv {

SourceModel parse_source_model(std::string_view tag) {
    if (tag == "pi") return SourceModel::PartialIntegration;
    if (tag == "whitney-pbo") return SourceModel::WhitneyPbo;
    if (tag == "whitney-mpo") return SourceModel::WhitneyMpo;
    if (tag == "hdiv") return SourceModel::Hdiv;
    if (tag == "localsub") return SourceModel::LocalSubtraction;
    throw InvalidInput("unknown source model tag '" + std::string(tag) + "'");
}

std::string to_string(SourceModel model) {
    switch (model) {
        case SourceModel::PartialIntegration: return "pi";
        case SourceModel::WhitneyPbo: return "whitney-pbo";
        case SourceModel::WhitneyMpo: return "whitney-mpo";
        case SourceModel::Hdiv: return "hdiv";
        case SourceModel::LocalSubtraction: return "localsub";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// LoadVector

double LoadVector::sum() const {
    double s = 0.0;
    for (const auto& [v, x] : entries) s += x;
    return s;
}

double LoadVector::max_abs() const {
    double m = 0.0;
    for (const auto& [v, x] : entries) m = std::max(m, std::abs(x));
    return m;
}

std::vector<double> LoadVector::dense(std::size_t num_vertices) const {
    std::vector<double> b(num_vertices, 0.0);
    for (const auto& [v, x] : entries) b[v] += x;
    return b;
}

double LoadVector::at(int vertex) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), vertex,
                               [](const auto& e, int v) { return e.first < v; });
    return (it != entries.end() && it->first == vertex) ? it->second : 0.0;
}

LoadVector LoadBasis::combine(const Vec3& moment) const {
    LoadVector out;
    out.model = axis[0].model;
    out.dipole = {axis[0].dipole.position, moment};
    // All three axes share the same sorted support.
    out.entries = axis[0].entries;
    for (std::size_t k = 0; k < out.entries.size(); ++k) {
        out.entries[k].second = moment.x() * axis[0].entries[k].second + moment.y() * axis[1].entries[k].second +
                                moment.z() * axis[2].entries[k].second;
    }
    return out;
}

namespace {

// Accumulates per-axis loads over a common support.
class BasisBuilder {
public:
    void add(int vertex, const Vec3& value) { slot(vertex) += value; }
    void add(int vertex, int axis, double value) { slot(vertex)[axis] += value; }

    LoadBasis finish(SourceModel model, const Vec3& position) const {
        LoadBasis basis;
        for (int a = 0; a < 3; ++a) {
            auto& lv = basis.axis[a];
            lv.model = model;
            lv.dipole = {position, Vec3::Unit(a)};
            lv.entries.reserve(acc_.size());
            for (const auto& [v, x] : acc_) lv.entries.emplace_back(v, x[a]);
        }
        return basis;
    }

    std::map<int, Vec3>& raw() { return acc_; }

private:
    Vec3& slot(int vertex) { return acc_.try_emplace(vertex, Vec3::Zero()).first->second; }

    std::map<int, Vec3> acc_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Partial integration

LoadBasis rhs_partial_integration_basis(const Mesh& mesh, const Vec3& position) {
    const auto loc = mesh.locate(position);
    BasisBuilder b;
    const auto& g = mesh.grads(loc.element);
    for (int i = 0; i < 4; ++i) b.add(mesh.tet(loc.element)[i], g[i]);
    return b.finish(SourceModel::PartialIntegration, position);
}

LoadVector rhs_partial_integration(const Mesh& mesh, const Dipole& d) {
    return rhs_partial_integration_basis(mesh, d.position).combine(d.moment);
}

// ---------------------------------------------------------------------------
// Descriptors

std::vector<std::pair<int, double>> HdivBasisDescriptor::coupling() const {
    std::vector<std::pair<int, double>> g{{poles[0], -1.0 / length}, {poles[1], 1.0 / length}};
    std::sort(g.begin(), g.end());
    return g;
}

Vec3 descriptor_field(const Mesh& mesh, const HdivBasisDescriptor& d, int element, const Vec3& x) {
    if (std::find(d.support.begin(), d.support.end(), element) == d.support.end()) return Vec3::Zero();
    const Vec3& a = mesh.vertex(d.poles[0]);
    const Vec3& b = mesh.vertex(d.poles[1]);
    if (d.kind == HdivBasisDescriptor::Kind::FaceIntersecting) {
        // Lowest-order Raviart-Thomas face function scaled to a unit moment.
        if (element == d.support[0]) return 4.0 / (3.0 * mesh.volume(element) * d.length) * (x - a);
        return -4.0 / (3.0 * mesh.volume(element) * d.length) * (x - b);
    }
    double fan_volume = 0.0;
    for (int e : d.support) fan_volume += mesh.volume(e);
    return (b - a) / (fan_volume * d.length);
}

DescriptorSet enumerate_hdiv_basis(const Mesh& mesh, int element) {
    DescriptorSet set;
    const auto& t = mesh.tet(element);
    for (int i = 0; i < 4; ++i) {
        const int n = mesh.face_neighbor(element, i);
        if (n < 0) {
            set.restricted = true;
            continue;
        }
        const int a = t[i];
        int b = -1;
        for (int v : mesh.tet(n))
            if (std::find(t.begin(), t.end(), v) == t.end()) b = v;
        HdivBasisDescriptor d;
        d.kind = HdivBasisDescriptor::Kind::FaceIntersecting;
        d.entity = {element, i};
        d.poles = {a, b};
        d.support = {element, n};
        const Vec3 ab = mesh.vertex(b) - mesh.vertex(a);
        d.length = ab.norm();
        d.direction = ab / d.length;
        d.position = 0.5 * (mesh.vertex(a) + mesh.vertex(b));
        set.descriptors.push_back(std::move(d));
    }
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) {
            const int v1 = std::min(t[i], t[j]);
            const int v2 = std::max(t[i], t[j]);
            const auto e1 = mesh.vertex_elements(v1);
            const auto e2 = mesh.vertex_elements(v2);
            std::vector<int> fan;
            std::set_intersection(e1.begin(), e1.end(), e2.begin(), e2.end(), std::back_inserter(fan));
            bool boundary = false;
            for (int f : fan) {
                const auto& ft = mesh.tet(f);
                for (int k = 0; k < 4; ++k) {
                    // Faces containing the edge are those opposite a vertex not on the edge.
                    if (ft[k] == v1 || ft[k] == v2) continue;
                    if (mesh.face_neighbor(f, k) < 0) boundary = true;
                }
            }
            if (boundary) {
                set.restricted = true;
                continue;
            }
            HdivBasisDescriptor d;
            d.kind = HdivBasisDescriptor::Kind::Edgewise;
            d.entity = {v1, v2};
            d.poles = {v1, v2};
            d.support = std::move(fan);
            const Vec3 ab = mesh.vertex(v2) - mesh.vertex(v1);
            d.length = ab.norm();
            d.direction = ab / d.length;
            d.position = 0.5 * (mesh.vertex(v1) + mesh.vertex(v2));
            set.descriptors.push_back(std::move(d));
        }
    return set;
}

namespace {

constexpr double kWeightFloor = 1e-10;

Eigen::VectorXd distance_weights(const std::vector<const HdivBasisDescriptor*>& ds, const Vec3& p, double h) {
    Eigen::VectorXd w(static_cast<Eigen::Index>(ds.size()));
    for (std::size_t k = 0; k < ds.size(); ++k) w[k] = (ds[k]->position - p).squaredNorm() / (h * h) + kWeightFloor;
    return w;
}

Eigen::MatrixXd directions(const std::vector<const HdivBasisDescriptor*>& ds) {
    Eigen::MatrixXd d(3, static_cast<Eigen::Index>(ds.size()));
    for (std::size_t k = 0; k < ds.size(); ++k) d.col(k) = ds[k]->direction;
    return d;
}

std::vector<const HdivBasisDescriptor*> select(const DescriptorSet& set, bool faces_only) {
    std::vector<const HdivBasisDescriptor*> out;
    for (const auto& d : set.descriptors)
        if (!faces_only || d.kind == HdivBasisDescriptor::Kind::FaceIntersecting) out.push_back(&d);
    return out;
}

void require_moment_span(const Eigen::MatrixXd& b, const char* model) {
    if (b.cols() < 3) {
        throw SingularSystem(std::string(model) + ": fewer than three descriptors available near the boundary",
                             std::numeric_limits<double>::infinity());
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(b);
    const auto& s = svd.singularValues();
    const double cond = s[0] / s[2];
    if (!(cond < 1e12)) {
        throw SingularSystem(std::string(model) + ": descriptor moments do not span R^3", cond);
    }
}

LoadBasis loads_from_coefficients(const std::vector<const HdivBasisDescriptor*>& ds, const Eigen::MatrixXd& c,
                                  SourceModel model, const Vec3& position) {
    BasisBuilder b;
    for (std::size_t k = 0; k < ds.size(); ++k) {
        for (const auto& [v, g] : ds[k]->coupling()) {
            for (int a = 0; a < 3; ++a) b.add(v, a, c(static_cast<Eigen::Index>(k), a) * g);
        }
    }
    return b.finish(model, position);
}

}  // namespace

Eigen::MatrixXd whitney_coefficients(const Mesh& mesh, const DescriptorSet& set, const Vec3& position,
                                     WhitneyFit fit) {
    const auto ds = select(set, fit == WhitneyFit::Pbo);
    const char* name = fit == WhitneyFit::Pbo ? "whitney-pbo" : "whitney-mpo";
    if (ds.empty()) throw SingularSystem(std::string(name) + ": no interior descriptors", INFINITY);
    const double h = mesh.edge_length(mesh.locate(position).element);
    const Eigen::VectorXd w = distance_weights(ds, position, h);
    const Eigen::VectorXd inv_sqrt_w = w.cwiseSqrt().cwiseInverse();
    // Weighted minimum norm subject to D c = q: c = W^{-1/2} (D W^{-1/2})^+ q.
    const Eigen::MatrixXd b = directions(ds) * inv_sqrt_w.asDiagonal();
    require_moment_span(b, name);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(b);
    const Eigen::MatrixXd y = cod.solve(Eigen::Matrix3d::Identity());
    return inv_sqrt_w.asDiagonal() * y;
}

LoadBasis rhs_whitney_basis(const Mesh& mesh, const Vec3& position, WhitneyFit fit) {
    const auto loc = mesh.locate(position);
    const auto set = enumerate_hdiv_basis(mesh, loc.element);
    const auto c = whitney_coefficients(mesh, set, position, fit);
    return loads_from_coefficients(select(set, fit == WhitneyFit::Pbo), c,
                                   fit == WhitneyFit::Pbo ? SourceModel::WhitneyPbo : SourceModel::WhitneyMpo,
                                   position);
}

LoadVector rhs_whitney(const Mesh& mesh, const Dipole& d, WhitneyFit fit) {
    return rhs_whitney_basis(mesh, d.position, fit).combine(d.moment);
}

Eigen::MatrixXd hdiv_coefficients(const Mesh& mesh, const DescriptorSet& set, const Vec3& position) {
    const auto ds = select(set, false);
    const auto k = static_cast<Eigen::Index>(ds.size());
    if (k == 0) throw SingularSystem("hdiv: no interior descriptors", INFINITY);
    const double h = mesh.edge_length(mesh.locate(position).element);
    const Eigen::MatrixXd d = directions(ds);
    require_moment_span(d, "hdiv");
    const Eigen::VectorXd w = distance_weights(ds, position, h);
    constexpr double mu = 1e-4;

    // Rows: symmetric first moments about p (6), then the weighted Tikhonov term.
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(6 + k, k);
    const double r2 = std::numbers::sqrt2;
    for (Eigen::Index j = 0; j < k; ++j) {
        const Vec3 r = (ds[j]->position - position) / h;
        const Mat3 s = r * ds[j]->direction.transpose() + ds[j]->direction * r.transpose();
        m(0, j) = s(0, 0);
        m(1, j) = s(1, 1);
        m(2, j) = s(2, 2);
        m(3, j) = r2 * s(0, 1);
        m(4, j) = r2 * s(0, 2);
        m(5, j) = r2 * s(1, 2);
        m(6 + j, j) = std::sqrt(mu * w[j]);
    }
    // KKT system for min |M c|^2 subject to D c = q.
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(k + 3, k + 3);
    kkt.topLeftCorner(k, k) = 2.0 * m.transpose() * m;
    kkt.topRightCorner(k, 3) = d.transpose();
    kkt.bottomLeftCorner(3, k) = d;
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(k + 3, 3);
    rhs.bottomRows(3) = Eigen::Matrix3d::Identity();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    if (!lu.isInvertible()) throw SingularSystem("hdiv: moment-matching system is singular", INFINITY);
    return lu.solve(rhs).topRows(k);
}

LoadBasis rhs_hdiv_basis(const Mesh& mesh, const Vec3& position) {
    const auto loc = mesh.locate(position);
    const auto set = enumerate_hdiv_basis(mesh, loc.element);
    const auto c = hdiv_coefficients(mesh, set, position);
    return loads_from_coefficients(select(set, false), c, SourceModel::Hdiv, position);
}

LoadVector rhs_hdiv(const Mesh& mesh, const Dipole& d) { return rhs_hdiv_basis(mesh, d.position).combine(d.moment); }

// ---------------------------------------------------------------------------
// Infinite-medium dipole

namespace {

struct InfiniteMedium {
    Mat3 inv;     // sigma^{-1}, sigma in S/mm
    double scale; // 1 / (4 pi sqrt(det sigma))

    explicit InfiniteMedium(const Mat3& sigma_si) {
        const Mat3 s = kSiemensPerMeterToPerMm * sigma_si;
        if (!is_spd(sigma_si)) throw InvalidInput("infinite-medium conductivity is not SPD");
        inv = s.inverse();
        scale = 1.0 / (4.0 * std::numbers::pi * std::sqrt(s.determinant()));
    }

    // Potential per unit moment (u = q . a) and its Jacobian (grad u = G q).
    void eval(const Vec3& r, Vec3& a, Mat3& g) const {
        const Vec3 s = inv * r;
        const double d = r.dot(s);
        const double d32 = d * std::sqrt(d);
        a = scale * s / d32;
        g = scale * (inv / d32 - 3.0 / (d32 * d) * (s * s.transpose()));
    }
};

}  // namespace

double infinite_medium_potential(const Mat3& sigma, const Vec3& p, const Vec3& q, const Vec3& x) {
    if ((x - p).norm() == 0.0) throw InvalidInput("infinite-medium potential evaluated at the dipole position");
    InfiniteMedium im(sigma);
    Vec3 a;
    Mat3 g;
    im.eval(x - p, a, g);
    return q.dot(a);
}

Vec3 infinite_medium_gradient(const Mat3& sigma, const Vec3& p, const Vec3& q, const Vec3& x) {
    if ((x - p).norm() == 0.0) throw InvalidInput("infinite-medium gradient evaluated at the dipole position");
    InfiniteMedium im(sigma);
    Vec3 a;
    Mat3 g;
    im.eval(x - p, a, g);
    return g * q;
}

// ---------------------------------------------------------------------------
// Local subtraction

double CorrectionMeta::singular_at(int vertex, const Vec3& moment) const {
    auto it = std::lower_bound(patch_vertices.begin(), patch_vertices.end(), vertex);
    if (it == patch_vertices.end() || *it != vertex) return 0.0;
    const auto k = static_cast<std::size_t>(it - patch_vertices.begin());
    return moment.x() * singular_potential[0][k] + moment.y() * singular_potential[1][k] +
           moment.z() * singular_potential[2][k];
}

bool CorrectionMeta::touches(std::span<const int> vertices) const {
    return std::any_of(vertices.begin(), vertices.end(), [&](int v) {
        return std::binary_search(patch_vertices.begin(), patch_vertices.end(), v);
    });
}

bool has_vertex_clearance(const Mesh& mesh, const Vec3& position, double fraction) {
    const auto loc = mesh.try_locate(position);
    if (!loc) return false;
    const double limit = fraction * mesh.edge_length(loc->element);
    for (int v : mesh.tet(loc->element))
        if ((mesh.vertex(v) - position).norm() < limit) return false;
    return true;
}

namespace {

using TetCorners = std::array<Vec3, 4>;

void split8(const TetCorners& t, std::array<TetCorners, 8>& out) {
    const Vec3 m01 = 0.5 * (t[0] + t[1]), m02 = 0.5 * (t[0] + t[2]), m03 = 0.5 * (t[0] + t[3]);
    const Vec3 m12 = 0.5 * (t[1] + t[2]), m13 = 0.5 * (t[1] + t[3]), m23 = 0.5 * (t[2] + t[3]);
    out = {TetCorners{t[0], m01, m02, m03}, TetCorners{m01, t[1], m12, m13}, TetCorners{m02, m12, t[2], m23},
           TetCorners{m03, m13, m23, t[3]},  TetCorners{m01, m02, m03, m13}, TetCorners{m01, m02, m12, m13},
           TetCorners{m02, m03, m13, m23},   TetCorners{m02, m12, m13, m23}};
}

double tet_volume(const TetCorners& t) {
    return std::abs((t[1] - t[0]).dot((t[2] - t[0]).cross(t[3] - t[0]))) / 6.0;
}

double max_edge(const TetCorners& t) {
    double m = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) m = std::max(m, (t[i] - t[j]).norm());
    return m;
}

// Calls f(x, weight) over quadrature points of t, refining sub-tetrahedra
// that are close to the singular point.
template <class F>
void integrate_near(const TetCorners& t, const Vec3& singular, const TetRule& rule, int depth, F&& f) {
    const Vec3 c = 0.25 * (t[0] + t[1] + t[2] + t[3]);
    if (depth > 0 && (c - singular).norm() < 1.5 * max_edge(t)) {
        std::array<TetCorners, 8> kids;
        split8(t, kids);
        for (const auto& k : kids) integrate_near(k, singular, rule, depth - 1, f);
        return;
    }
    const double vol = tet_volume(t);
    for (std::size_t q = 0; q < rule.weights.size(); ++q) {
        const auto& l = rule.bary[q];
        const Vec3 x = l[0] * t[0] + l[1] * t[1] + l[2] * t[2] + l[3] * t[3];
        f(x, vol * rule.weights[q]);
    }
}

}  // namespace

CorrectionMeta local_subtraction_patch(const Mesh& mesh, const Vec3& position, const LocalSubtractionOptions& options) {
    if (options.rings < 1) throw InvalidInput("local subtraction needs at least one patch ring");
    const auto loc = mesh.locate(position);
    const int e0 = loc.element;
    const double h = mesh.edge_length(e0);
    for (int v : mesh.tet(e0)) {
        if ((mesh.vertex(v) - position).norm() < options.min_vertex_distance * h) {
            throw InvalidInput("dipole lies within " + std::to_string(options.min_vertex_distance) +
                               " element edge lengths of patch vertex " + std::to_string(v));
        }
    }

    // Inner rings (chi = 1 on all their vertices) and the transition ring.
    std::vector<int> inner{e0};
    for (int r = 0; r < options.rings; ++r) {
        std::vector<int> grown;
        for (int e : inner)
            for (int v : mesh.tet(e))
                for (int n : mesh.vertex_elements(v)) grown.push_back(n);
        std::sort(grown.begin(), grown.end());
        grown.erase(std::unique(grown.begin(), grown.end()), grown.end());
        inner = std::move(grown);
    }
    std::vector<int> one_vertices;
    for (int e : inner)
        for (int v : mesh.tet(e)) one_vertices.push_back(v);
    std::sort(one_vertices.begin(), one_vertices.end());
    one_vertices.erase(std::unique(one_vertices.begin(), one_vertices.end()), one_vertices.end());
    std::vector<int> patch;
    for (int v : one_vertices)
        for (int n : mesh.vertex_elements(v)) patch.push_back(n);
    std::sort(patch.begin(), patch.end());
    patch.erase(std::unique(patch.begin(), patch.end()), patch.end());

    CorrectionMeta meta;
    meta.source_element = e0;
    meta.patch_elements = patch;
    for (int e : patch)
        for (int v : mesh.tet(e)) meta.patch_vertices.push_back(v);
    std::sort(meta.patch_vertices.begin(), meta.patch_vertices.end());
    meta.patch_vertices.erase(std::unique(meta.patch_vertices.begin(), meta.patch_vertices.end()),
                              meta.patch_vertices.end());

    const InfiniteMedium im(mesh.sigma(e0));
    for (int v : meta.patch_vertices) {
        const double c = std::binary_search(one_vertices.begin(), one_vertices.end(), v) ? 1.0 : 0.0;
        meta.chi.push_back(c);
        Vec3 a = Vec3::Zero();
        if (c != 0.0) {
            Mat3 g;
            im.eval(mesh.vertex(v) - position, a, g);
        }
        for (int ax = 0; ax < 3; ++ax) meta.singular_potential[ax].push_back(c * a[ax]);
    }
    return meta;
}

LocalSubtractionBasis rhs_local_subtraction_basis(const Mesh& mesh, const Vec3& position,
                                                  const LocalSubtractionOptions& options) {
    LocalSubtractionBasis out;
    out.meta = local_subtraction_patch(mesh, position, options);
    const auto& meta = out.meta;
    const int e0 = meta.source_element;
    const auto chi_of = [&](int v) {
        const auto it = std::lower_bound(meta.patch_vertices.begin(), meta.patch_vertices.end(), v);
        return meta.chi[static_cast<std::size_t>(it - meta.patch_vertices.begin())];
    };
    const Mat3 sigma_inf_si = mesh.sigma(e0);
    const InfiniteMedium im(sigma_inf_si);
    const Mat3 sigma_inf = kSiemensPerMeterToPerMm * sigma_inf_si;

    const TetRule& rule = tet_rule(options.quadrature_degree);
    BasisBuilder acc;
    for (int e : meta.patch_elements) {
        if (e == e0) continue;
        const auto& t = mesh.tet(e);
        const auto& grads = mesh.grads(e);
        std::array<double, 4> chi{};
        Vec3 grad_chi = Vec3::Zero();
        for (int i = 0; i < 4; ++i) {
            chi[i] = chi_of(t[i]);
            grad_chi += chi[i] * grads[i];
        }
        const bool transition = grad_chi.squaredNorm() > 0.0;
        const Mat3 jump = kSiemensPerMeterToPerMm * mesh.sigma(e) - sigma_inf;
        const bool has_jump = jump.cwiseAbs().maxCoeff() > 1e-14 * sigma_inf.cwiseAbs().maxCoeff();
        if (!transition && !has_jump) continue;

        const Vec3 s_grad_chi = sigma_inf * grad_chi;
        std::array<std::array<double, 3>, 4> local{};  // [vertex][axis]
        TetCorners corners{mesh.vertex(t[0]), mesh.vertex(t[1]), mesh.vertex(t[2]), mesh.vertex(t[3])};
        integrate_near(corners, position, rule, 3, [&](const Vec3& x, double wt) {
            const auto phi = mesh.barycentric(e, x);
            const double chi_x = chi[0] * phi[0] + chi[1] * phi[1] + chi[2] * phi[2] + chi[3] * phi[3];
            Vec3 a;
            Mat3 g;  // column ax = grad u_inf for unit moment along ax
            im.eval(x - position, a, g);
            for (int ax = 0; ax < 3; ++ax) {
                const Vec3 grad_u = g.col(ax);
                const double u = a[ax];
                for (int i = 0; i < 4; ++i) {
                    double val = 0.0;
                    if (transition) {
                        val -= u * s_grad_chi.dot(grads[i]) - phi[i] * (sigma_inf * grad_u).dot(grad_chi);
                    }
                    if (has_jump) {
                        val -= (jump * (u * grad_chi + chi_x * grad_u)).dot(grads[i]);
                    }
                    local[i][ax] += wt * val;
                }
            }
        });
        for (int i = 0; i < 4; ++i) {
            acc.add(t[i], Vec3(local[i][0], local[i][1], local[i][2]));
        }
    }
    // The transition integrals sum to zero only up to quadrature error
    // (divergence theorem); spread the residual evenly over the load support.
    auto& raw = acc.raw();
    if (!raw.empty()) {
        Vec3 total = Vec3::Zero();
        for (const auto& [v, x] : raw) total += x;
        const Vec3 shift = total / static_cast<double>(raw.size());
        for (auto& [v, x] : raw) x -= shift;
    }
    out.loads = acc.finish(SourceModel::LocalSubtraction, position);
    return out;
}

std::pair<LoadVector, CorrectionMeta> rhs_local_subtraction(const Mesh& mesh, const Dipole& d,
                                                            const LocalSubtractionOptions& options) {
    auto basis = rhs_local_subtraction_basis(mesh, d.position, options);
    return {basis.loads.combine(d.moment), std::move(basis.meta)};
}

// ---------------------------------------------------------------------------
// Dispatch

LoadBasis rhs_basis(const Mesh& mesh, const Vec3& position, SourceModel model,
                    const LocalSubtractionOptions& ls_options, CorrectionMeta* meta) {
    switch (model) {
        case SourceModel::PartialIntegration: return rhs_partial_integration_basis(mesh, position);
        case SourceModel::WhitneyPbo: return rhs_whitney_basis(mesh, position, WhitneyFit::Pbo);
        case SourceModel::WhitneyMpo: return rhs_whitney_basis(mesh, position, WhitneyFit::Mpo);
        case SourceModel::Hdiv: return rhs_hdiv_basis(mesh, position);
        case SourceModel::LocalSubtraction: {
            auto b = rhs_local_subtraction_basis(mesh, position, ls_options);
            if (meta) *meta = std::move(b.meta);
            return std::move(b.loads);
        }
    }
    throw InvalidInput("unhandled source model");
}

LoadVector rhs(const Mesh& mesh, const Dipole& d, SourceModel model) {
    return rhs_basis(mesh, d.position, model).combine(d.moment);
}

}  // namespace fwdinv
