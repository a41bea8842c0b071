// P1 finite-element stiffness assembly, PCG solves and the reciprocity
// transfer matrix under the point electrode model.
//
// Units: lengths in mm, conductivities given in S/m and converted to S/mm
// during assembly, loads in A, so node potentials come out in V.
#pragma once

#include "fwdinv/core.hpp"
#include "fwdinv/mesh.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace fwdinv {

inline constexpr double kSiemensPerMeterToPerMm = 1e-3;

/// Compressed sparse row matrix with sorted column indices.
struct CsrMatrix {
    int rows = 0;
    std::vector<int> row_ptr;
    std::vector<int> col;
    std::vector<double> val;

    /// y = A x
    void multiply(std::span<const double> x, std::span<double> y) const;
    double at(int r, int c) const;
    std::vector<double> diagonal() const;
};

/// Symmetric positive semi-definite P1 stiffness matrix (units S).
using StiffnessMatrix = CsrMatrix;

/// Entry (i,j) = sum over shared elements of volume * grad(phi_i)^T sigma grad(phi_j).
/// Throws InvalidInput on a non-SPD element tensor.
StiffnessMatrix assemble_stiffness(const Mesh& mesh);

enum class Preconditioner { Jacobi, IncompleteCholesky };

struct SolverOptions {
    double tol = 1e-9;
    /// 0 selects the default cap of 10 * sqrt(#vertices).
    int max_iterations = 0;
    Preconditioner preconditioner = Preconditioner::Jacobi;
};

struct SolveReport {
    int iterations = 0;
    double relative_residual = 0.0;
};

/// Preconditioned conjugate gradients for the singular Neumann system.
///
/// The load must be compatible (sum close to zero); the returned potential
/// has zero mean.
class SpdSolver {
public:
    SpdSolver(const StiffnessMatrix& a, SolverOptions options = {});
    std::vector<double> solve(std::span<const double> b, SolveReport* report = nullptr) const;
    const SolverOptions& options() const { return options_; }
    int max_iterations() const;

private:
    void apply_preconditioner(std::span<const double> r, std::span<double> z) const;

    const StiffnessMatrix& a_;
    SolverOptions options_;
    std::vector<double> inv_diag_;
    CsrMatrix ic_;  // lower factor for IC(0), same pattern as the lower triangle
};

/// Convenience wrapper around SpdSolver.
std::vector<double> solve_spd(const StiffnessMatrix& a, std::span<const double> b, double tol,
                              SolveReport* report = nullptr);

struct ReferencePolicy {
    enum class Kind : std::uint32_t { Average = 0, Fixed = 1 };
    Kind kind = Kind::Average;
    int electrode = 0;  // used when kind == Fixed

    static ReferencePolicy average() { return {}; }
    static ReferencePolicy fixed(int e) { return {Kind::Fixed, e}; }
    bool operator==(const ReferencePolicy&) const = default;
};

/// Point electrodes attached to scalp vertices.
struct ElectrodeSet {
    std::vector<Vec3> positions;
    std::vector<int> vertices;
    ReferencePolicy reference;

    std::size_t size() const { return vertices.size(); }
};

/// Snaps each requested position to its nearest outer-boundary vertex.
/// Throws InvalidInput when two electrodes land on the same vertex.
ElectrodeSet attach_electrodes(const Mesh& mesh, std::span<const Vec3> requested,
                               ReferencePolicy reference = ReferencePolicy::average());

/// Quasi-uniform positions on a polar cap of the given radius: polar angle
/// in [0, max_polar_deg] around +z, Fibonacci-spiral ordering.
std::vector<Vec3> cap_electrode_positions(int count, double max_polar_deg, double radius,
                                          const Vec3& center = Vec3::Zero());

/// Measurement vector (V) from node potentials: PEM sampling then referencing.
VectorX electrode_readout(std::span<const double> u, const ElectrodeSet& electrodes);

/// Node-by-electrode matrix T with readout(A^+ b) = T^T b.
struct TransferMatrix {
    MatrixX data;  // rows = vertices, cols = electrodes
    double tol = 0.0;
    ReferencePolicy reference;

    /// T^T b for a sparse or dense load.
    VectorX readout(std::span<const double> b) const;
};

/// Solves one system per electrode: A t_e = indicator(e) - reference load.
/// Columns are independent and solved on `threads` workers; each solve is
/// deterministic, so the result is identical to a serial run.
TransferMatrix compute_transfer_matrix(const StiffnessMatrix& a, const ElectrodeSet& electrodes,
                                       SolverOptions options = {}, unsigned threads = 1);

/// Binary layout (little endian):
///   "TMAT" | u32 version=1 | u64 rows | u64 cols | u32 reference kind |
///   i32 reference electrode | f64 tol | rows*cols f64, column-major
void save_transfer_matrix(const TransferMatrix& t, const std::filesystem::path& path);
TransferMatrix load_transfer_matrix(const std::filesystem::path& path);

}  // namespace fwdinv
