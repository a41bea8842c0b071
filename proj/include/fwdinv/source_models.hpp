// Point-dipole right-hand sides for the FEM forward problem.
//
// Every model turns a dipole (position in mm, moment in A*mm) into a load
// vector over mesh vertices (A) whose entries sum to zero. Loads are linear
// in the moment, so each model is evaluated once per Cartesian axis
// (a LoadBasis) and combined.
#pragma once

#include "fwdinv/core.hpp"
#include "fwdinv/mesh.hpp"

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fwdinv {

struct Dipole {
    Vec3 position;
    Vec3 moment;
};

enum class SourceModel { PartialIntegration, WhitneyPbo, WhitneyMpo, Hdiv, LocalSubtraction };

/// Config tags: `pi`, `whitney-pbo`, `whitney-mpo`, `hdiv`, `localsub`.
SourceModel parse_source_model(std::string_view tag);
std::string to_string(SourceModel model);

/// Sparse load over mesh vertices, entries sorted by vertex.
struct LoadVector {
    std::vector<std::pair<int, double>> entries;
    SourceModel model = SourceModel::PartialIntegration;
    Dipole dipole{};

    double sum() const;
    double max_abs() const;
    std::vector<double> dense(std::size_t num_vertices) const;
    double at(int vertex) const;
};

/// Loads for unit moments along x, y and z at a fixed position.
struct LoadBasis {
    std::array<LoadVector, 3> axis;
    /// Load for an arbitrary moment, sum_a q_a * axis[a].
    LoadVector combine(const Vec3& moment) const;
};

// --- partial integration ----------------------------------------------------

/// b_i = q . grad(phi_i)(p) on the enclosing element.
LoadVector rhs_partial_integration(const Mesh& mesh, const Dipole& d);
LoadBasis rhs_partial_integration_basis(const Mesh& mesh, const Vec3& position);

// --- divergence-conforming descriptors --------------------------------------

/// A face-intersecting or edgewise lowest-order divergence-conforming basis
/// function, normalised to a unit dipole moment.
///
/// Its FEM load is a monopole pair: -1/length at `poles[0]`, +1/length at
/// `poles[1]`; its moment is `direction` located at `position` (the pole
/// midpoint).
struct HdivBasisDescriptor {
    enum class Kind { FaceIntersecting, Edgewise };
    Kind kind = Kind::FaceIntersecting;
    /// Face: the owning element and the local index of the vertex opposite the
    /// face. Edge: the two edge vertices (ascending).
    std::array<int, 2> entity{};
    std::array<int, 2> poles{};
    std::vector<int> support;
    Vec3 position = Vec3::Zero();
    Vec3 direction = Vec3::Zero();
    double length = 0.0;

    /// Coupling integrals g_i = integral of w . grad(phi_i), in closed form.
    std::vector<std::pair<int, double>> coupling() const;
};

/// Value of a descriptor's vector field at x inside support element `element`.
Vec3 descriptor_field(const Mesh& mesh, const HdivBasisDescriptor& d, int element, const Vec3& x);

struct DescriptorSet {
    std::vector<HdivBasisDescriptor> descriptors;
    /// True when boundary faces or edges were dropped.
    bool restricted = false;
};

/// Face descriptors for the interior faces of `element` followed by edge
/// descriptors for its interior edges.
DescriptorSet enumerate_hdiv_basis(const Mesh& mesh, int element);

enum class WhitneyFit { Pbo, Mpo };

/// Whitney source model: descriptor coefficients fitted to (p, q).
///
/// PBO: face descriptors of the enclosing element, exact moment match,
/// minimum norm weighted by squared distance from p.
/// MPO: the same weighted fit over the full face + edge set.
LoadVector rhs_whitney(const Mesh& mesh, const Dipole& d, WhitneyFit fit);
LoadBasis rhs_whitney_basis(const Mesh& mesh, const Vec3& position, WhitneyFit fit);

/// Coefficients of the Whitney fit (one column per Cartesian axis).
Eigen::MatrixXd whitney_coefficients(const Mesh& mesh, const DescriptorSet& set, const Vec3& position,
                                     WhitneyFit fit);

/// H(div) model: face + edge descriptors with the dipole moment matched
/// exactly and the first-order position moments about p matched in least
/// squares.
LoadVector rhs_hdiv(const Mesh& mesh, const Dipole& d);
LoadBasis rhs_hdiv_basis(const Mesh& mesh, const Vec3& position);
Eigen::MatrixXd hdiv_coefficients(const Mesh& mesh, const DescriptorSet& set, const Vec3& position);

// --- local subtraction --------------------------------------------------------

/// Potential of a dipole in an unbounded homogeneous anisotropic medium.
/// sigma in S/m, positions in mm, moment in A*mm; returns V.
double infinite_medium_potential(const Mat3& sigma, const Vec3& p, const Vec3& q, const Vec3& x);
/// Gradient of infinite_medium_potential with respect to x (V/mm).
Vec3 infinite_medium_gradient(const Mat3& sigma, const Vec3& p, const Vec3& q, const Vec3& x);

struct LocalSubtractionOptions {
    int rings = 1;
    /// Reject dipoles closer than this fraction of the element's mean edge
    /// length to any vertex of the source element.
    double min_vertex_distance = 0.1;
    int quadrature_degree = 4;
};

/// Patch bookkeeping: the cutoff chi on patch vertices and the singular
/// potential chi * u_inf there, so total potential = chi u_inf + correction.
struct CorrectionMeta {
    int source_element = -1;
    std::vector<int> patch_elements;
    std::vector<int> patch_vertices;      // ascending
    std::vector<double> chi;              // per patch vertex
    std::array<std::vector<double>, 3> singular_potential;  // chi * u_inf per patch vertex, unit moments

    /// chi * u_inf at a mesh vertex for the given moment (0 outside the patch).
    double singular_at(int vertex, const Vec3& moment) const;
    bool touches(std::span<const int> vertices) const;
};

/// Patch and singular potential without the load integrals. Throws for the
/// same positions as rhs_local_subtraction_basis.
CorrectionMeta local_subtraction_patch(const Mesh& mesh, const Vec3& position,
                                       const LocalSubtractionOptions& options = {});

struct LocalSubtractionBasis {
    LoadBasis loads;
    CorrectionMeta meta;
};

LocalSubtractionBasis rhs_local_subtraction_basis(const Mesh& mesh, const Vec3& position,
                                                  const LocalSubtractionOptions& options = {});
std::pair<LoadVector, CorrectionMeta> rhs_local_subtraction(const Mesh& mesh, const Dipole& d,
                                                            const LocalSubtractionOptions& options = {});

// --- dispatch -------------------------------------------------------------------

/// Load basis for any model; the local-subtraction meta is returned via `meta` when non-null.
LoadBasis rhs_basis(const Mesh& mesh, const Vec3& position, SourceModel model,
                    const LocalSubtractionOptions& ls_options = {}, CorrectionMeta* meta = nullptr);
LoadVector rhs(const Mesh& mesh, const Dipole& d, SourceModel model);

/// Position admissible for every model (clear of source-element vertices).
bool has_vertex_clearance(const Mesh& mesh, const Vec3& position, double fraction);

}  // namespace fwdinv
