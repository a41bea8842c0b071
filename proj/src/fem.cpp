#include "fwdinv/fem.hpp"

#include "fwdinv/binio.hpp"
#include "fwdinv/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace fwdinv {

// ---------------------------------------------------------------------------
// CsrMatrix

void CsrMatrix::multiply(std::span<const double> x, std::span<double> y) const {
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int k = row_ptr[r]; k < row_ptr[r + 1]; ++k) s += val[k] * x[col[k]];
        y[r] = s;
    }
}

double CsrMatrix::at(int r, int c) const {
    const auto b = col.begin() + row_ptr[r];
    const auto e = col.begin() + row_ptr[r + 1];
    const auto it = std::lower_bound(b, e, c);
    return (it != e && *it == c) ? val[it - col.begin()] : 0.0;
}

std::vector<double> CsrMatrix::diagonal() const {
    std::vector<double> d(rows);
    for (int r = 0; r < rows; ++r) d[r] = at(r, r);
    return d;
}

// ---------------------------------------------------------------------------
// Assembly

StiffnessMatrix assemble_stiffness(const Mesh& mesh) {
    const int n = static_cast<int>(mesh.num_vertices());
    StiffnessMatrix a;
    a.rows = n;
    a.row_ptr.assign(n + 1, 0);
    std::vector<int> nbrs;
    for (int v = 0; v < n; ++v) {
        nbrs.clear();
        for (int e : mesh.vertex_elements(v))
            for (int w : mesh.tet(e)) nbrs.push_back(w);
        std::sort(nbrs.begin(), nbrs.end());
        nbrs.erase(std::unique(nbrs.begin(), nbrs.end()), nbrs.end());
        a.col.insert(a.col.end(), nbrs.begin(), nbrs.end());
        a.row_ptr[v + 1] = static_cast<int>(a.col.size());
    }
    a.val.assign(a.col.size(), 0.0);

    for (int e = 0; e < static_cast<int>(mesh.num_elements()); ++e) {
        const Mat3& s = mesh.sigma(e);
        if (!is_spd(s)) {
            throw InvalidInput("conductivity tensor of element " + std::to_string(e) + " is not SPD");
        }
        const Mat3 sigma = kSiemensPerMeterToPerMm * s;
        const auto& g = mesh.grads(e);
        const auto& t = mesh.tet(e);
        const double vol = mesh.volume(e);
        std::array<Vec3, 4> sg;
        for (int i = 0; i < 4; ++i) sg[i] = sigma * g[i];
        for (int i = 0; i < 4; ++i) {
            const int r = t[i];
            const auto b = a.col.begin() + a.row_ptr[r];
            const auto en = a.col.begin() + a.row_ptr[r + 1];
            for (int j = 0; j < 4; ++j) {
                const auto it = std::lower_bound(b, en, t[j]);
                a.val[it - a.col.begin()] += vol * g[i].dot(sg[j]);
            }
        }
    }
    return a;
}

// ---------------------------------------------------------------------------
// PCG

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void remove_mean(std::span<double> x) {
    if (x.empty()) return;
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    for (double& v : x) v -= m;
}

// IC(0) on the lower triangle of (A + shift * diag(A)).
CsrMatrix incomplete_cholesky(const CsrMatrix& a) {
    for (double shift = 1e-3; shift < 16.0; shift *= 2.0) {
        CsrMatrix l;
        l.rows = a.rows;
        l.row_ptr.assign(a.rows + 1, 0);
        for (int r = 0; r < a.rows; ++r) {
            for (int k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k) {
                if (a.col[k] > r) break;
                l.col.push_back(a.col[k]);
                l.val.push_back(a.val[k] * (a.col[k] == r ? 1.0 + shift : 1.0));
            }
            l.row_ptr[r + 1] = static_cast<int>(l.col.size());
        }
        bool ok = true;
        for (int i = 0; i < l.rows && ok; ++i) {
            const int b = l.row_ptr[i], e = l.row_ptr[i + 1];
            for (int k = b; k < e - 1; ++k) {
                const int j = l.col[k];
                // l_ij = (a_ij - sum_{m<j} l_im l_jm) / l_jj over the shared pattern
                double s = l.val[k];
                int p = b, q = l.row_ptr[j];
                const int qe = l.row_ptr[j + 1] - 1;
                while (p < k && q < qe) {
                    if (l.col[p] == l.col[q]) {
                        s -= l.val[p] * l.val[q];
                        ++p, ++q;
                    } else if (l.col[p] < l.col[q]) {
                        ++p;
                    } else {
                        ++q;
                    }
                }
                l.val[k] = s / l.val[l.row_ptr[j + 1] - 1];
            }
            double d = l.val[e - 1];
            for (int k = b; k < e - 1; ++k) d -= l.val[k] * l.val[k];
            if (!(d > 0.0)) {
                ok = false;
                break;
            }
            l.val[e - 1] = std::sqrt(d);
        }
        if (ok) return l;
    }
    throw SingularSystem("incomplete Cholesky factorization broke down", std::numeric_limits<double>::infinity());
}

}  // namespace

SpdSolver::SpdSolver(const StiffnessMatrix& a, SolverOptions options) : a_(a), options_(options) {
    if (!(options_.tol > 0.0)) throw InvalidInput("solver tolerance must be positive");
    const auto d = a_.diagonal();
    inv_diag_.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!(d[i] > 0.0)) throw InvalidInput("stiffness matrix has a non-positive diagonal entry");
        inv_diag_[i] = 1.0 / d[i];
    }
    if (options_.preconditioner == Preconditioner::IncompleteCholesky) ic_ = incomplete_cholesky(a_);
}

int SpdSolver::max_iterations() const {
    if (options_.max_iterations > 0) return options_.max_iterations;
    return static_cast<int>(std::ceil(10.0 * std::sqrt(static_cast<double>(a_.rows))));
}

void SpdSolver::apply_preconditioner(std::span<const double> r, std::span<double> z) const {
    if (options_.preconditioner == Preconditioner::Jacobi) {
        for (std::size_t i = 0; i < r.size(); ++i) z[i] = inv_diag_[i] * r[i];
        return;
    }
    const int n = ic_.rows;
    for (int i = 0; i < n; ++i) {
        double s = r[i];
        const int e = ic_.row_ptr[i + 1] - 1;
        for (int k = ic_.row_ptr[i]; k < e; ++k) s -= ic_.val[k] * z[ic_.col[k]];
        z[i] = s / ic_.val[e];
    }
    for (int i = n - 1; i >= 0; --i) {
        const int e = ic_.row_ptr[i + 1] - 1;
        z[i] /= ic_.val[e];
        for (int k = ic_.row_ptr[i]; k < e; ++k) z[ic_.col[k]] -= ic_.val[k] * z[i];
    }
}

std::vector<double> SpdSolver::solve(std::span<const double> b_in, SolveReport* report) const {
    const std::size_t n = static_cast<std::size_t>(a_.rows);
    if (b_in.size() != n) throw InvalidInput("load vector length differs from matrix size");
    std::vector<double> b(b_in.begin(), b_in.end());
    double abs_sum = 0.0;
    for (double v : b) abs_sum += std::abs(v);
    const double total = std::accumulate(b.begin(), b.end(), 0.0);
    if (std::abs(total) > 1e-10 * std::max(abs_sum, std::numeric_limits<double>::min())) {
        throw InvalidInput("incompatible load: entries sum to " + std::to_string(total) +
                           " (must vanish for the Neumann problem)");
    }
    remove_mean(b);
    std::vector<double> x(n, 0.0);
    const double bnorm = norm(b);
    if (bnorm == 0.0) {
        if (report) *report = {0, 0.0};
        return x;
    }
    std::vector<double> r = b, z(n), p(n), q(n);
    const int cap = max_iterations();
    int it = 0;
    double rel = 1.0;
    while (it < cap) {
        apply_preconditioner(r, z);
        remove_mean(z);
        double rho = dot(r, z);
        p = z;
        while (it < cap) {
            a_.multiply(p, q);
            const double alpha = rho / dot(p, q);
            for (std::size_t i = 0; i < n; ++i) {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            ++it;
            rel = norm(r) / bnorm;
            if (rel <= 0.5 * options_.tol) break;
            apply_preconditioner(r, z);
            remove_mean(z);
            const double rho_next = dot(r, z);
            const double beta = rho_next / rho;
            rho = rho_next;
            for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
        }
        // Recompute the true residual; restart if drift left it above tolerance.
        a_.multiply(x, q);
        for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - q[i];
        rel = norm(r) / bnorm;
        if (rel <= options_.tol) break;
    }
    remove_mean(x);
    if (report) *report = {it, rel};
    if (rel > options_.tol) {
        throw NotConverged("PCG did not reach relative residual " + std::to_string(options_.tol) + " within " +
                               std::to_string(cap) + " iterations",
                           it, rel);
    }
    return x;
}

std::vector<double> solve_spd(const StiffnessMatrix& a, std::span<const double> b, double tol, SolveReport* report) {
    SolverOptions o;
    o.tol = tol;
    return SpdSolver(a, o).solve(b, report);
}

// ---------------------------------------------------------------------------
// Electrodes

ElectrodeSet attach_electrodes(const Mesh& mesh, std::span<const Vec3> requested, ReferencePolicy reference) {
    const auto boundary = mesh.boundary_vertices();
    if (boundary.empty()) throw InvalidInput("mesh has no boundary vertices for electrodes");
    ElectrodeSet set;
    set.reference = reference;
    for (const Vec3& p : requested) {
        int best = boundary.front();
        double best_d = std::numeric_limits<double>::infinity();
        for (int v : boundary) {
            const double d = (mesh.vertex(v) - p).squaredNorm();
            if (d < best_d) best = v, best_d = d;
        }
        if (std::find(set.vertices.begin(), set.vertices.end(), best) != set.vertices.end()) {
            throw InvalidInput("two electrodes snap to the same scalp vertex " + std::to_string(best));
        }
        set.vertices.push_back(best);
        set.positions.push_back(mesh.vertex(best));
    }
    if (reference.kind == ReferencePolicy::Kind::Fixed &&
        (reference.electrode < 0 || static_cast<std::size_t>(reference.electrode) >= set.size())) {
        throw InvalidInput("fixed reference electrode index out of range");
    }
    return set;
}

std::vector<Vec3> cap_electrode_positions(int count, double max_polar_deg, double radius, const Vec3& center) {
    if (count <= 0) throw InvalidInput("electrode count must be positive");
    const double zmin = std::cos(max_polar_deg * std::numbers::pi / 180.0);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    std::vector<Vec3> out;
    out.reserve(count);
    for (int k = 0; k < count; ++k) {
        const double z = 1.0 - (1.0 - zmin) * (k + 0.5) / count;
        const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * k;
        out.push_back(center + radius * Vec3(rho * std::cos(phi), rho * std::sin(phi), z));
    }
    return out;
}

VectorX electrode_readout(std::span<const double> u, const ElectrodeSet& electrodes) {
    VectorX m(static_cast<Eigen::Index>(electrodes.size()));
    for (std::size_t e = 0; e < electrodes.size(); ++e) m[e] = u[electrodes.vertices[e]];
    if (electrodes.reference.kind == ReferencePolicy::Kind::Average) {
        m.array() -= m.mean();
    } else {
        m.array() -= m[electrodes.reference.electrode];
    }
    return m;
}

// ---------------------------------------------------------------------------
// Transfer matrix

VectorX TransferMatrix::readout(std::span<const double> b) const {
    const Eigen::Map<const VectorX> bv(b.data(), static_cast<Eigen::Index>(b.size()));
    return data.transpose() * bv;
}

TransferMatrix compute_transfer_matrix(const StiffnessMatrix& a, const ElectrodeSet& electrodes,
                                       SolverOptions options, unsigned threads) {
    const std::size_t m = electrodes.size();
    if (m == 0) throw InvalidInput("transfer matrix needs at least one electrode");
    const SpdSolver solver(a, options);
    TransferMatrix t;
    t.tol = options.tol;
    t.reference = electrodes.reference;
    t.data = MatrixX::Zero(a.rows, static_cast<Eigen::Index>(m));
    parallel_for(m, threads, [&](std::size_t e) {
        std::vector<double> load(a.rows, 0.0);
        load[electrodes.vertices[e]] += 1.0;
        if (electrodes.reference.kind == ReferencePolicy::Kind::Average) {
            for (int v : electrodes.vertices) load[v] -= 1.0 / static_cast<double>(m);
        } else {
            load[electrodes.vertices[electrodes.reference.electrode]] -= 1.0;
        }
        try {
            const auto col = solver.solve(load);
            std::copy(col.begin(), col.end(), t.data.col(static_cast<Eigen::Index>(e)).data());
        } catch (const NotConverged& err) {
            throw NotConverged("transfer matrix column " + std::to_string(e) + ": " + err.what(), err.iterations,
                               err.residual);
        }
    });
    // Columns sum to zero only up to the PCG tolerance; apply the average
    // reference exactly so every readout is referenced to rounding.
    if (electrodes.reference.kind == ReferencePolicy::Kind::Average)
        t.data.colwise() -= t.data.rowwise().mean();
    return t;
}

namespace {
constexpr char kTmatMagic[4] = {'T', 'M', 'A', 'T'};
constexpr std::uint32_t kTmatVersion = 1;
}  // namespace

void save_transfer_matrix(const TransferMatrix& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open '" + path.string() + "' for writing");
    binio::put_bytes(os, kTmatMagic, 4);
    binio::put(os, kTmatVersion);
    binio::put(os, static_cast<std::uint64_t>(t.data.rows()));
    binio::put(os, static_cast<std::uint64_t>(t.data.cols()));
    binio::put(os, static_cast<std::uint32_t>(t.reference.kind));
    binio::put(os, static_cast<std::int32_t>(t.reference.electrode));
    binio::put(os, t.tol);
    binio::put_bytes(os, t.data.data(), sizeof(double) * static_cast<std::size_t>(t.data.size()));
    if (!os) throw Error("write failed for '" + path.string() + "'");
}

TransferMatrix load_transfer_matrix(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open '" + path.string() + "'");
    char magic[4];
    binio::get_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, kTmatMagic, 4) != 0) throw FormatError("not a transfer-matrix file (bad magic)");
    const auto version = binio::get<std::uint32_t>(is, "version");
    if (version != kTmatVersion) throw FormatError("unsupported transfer-matrix version " + std::to_string(version));
    const auto rows = binio::get<std::uint64_t>(is, "row count");
    const auto cols = binio::get<std::uint64_t>(is, "column count");
    TransferMatrix t;
    const auto kind = binio::get<std::uint32_t>(is, "reference kind");
    if (kind > 1) throw FormatError("unknown reference policy code " + std::to_string(kind));
    t.reference.kind = static_cast<ReferencePolicy::Kind>(kind);
    t.reference.electrode = binio::get<std::int32_t>(is, "reference electrode");
    t.tol = binio::get<double>(is, "tolerance");
    t.data.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    binio::get_bytes(is, t.data.data(), sizeof(double) * rows * cols, "matrix data");
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after transfer matrix");
    return t;
}

}  // namespace fwdinv
