// Layered-sphere tetrahedral head models, point location and surface queries.
#pragma once

#include "fwdinv/core.hpp"

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fwdinv {

/// Description of a concentric-shell volume conductor.
///
/// Radii are in mm (innermost first), conductivities in S/m. A layer's
/// tensor may be anisotropic; the mesher copies it to every element of
/// the layer unless a radial anisotropy is requested.
struct LayeredSphereSpec {
    std::vector<double> radii;
    std::vector<Mat3> conductivity;
    int refinement = 3;
    Vec3 center = Vec3::Zero();
    /// Upper bound on the number of tetrahedra.
    std::size_t element_cap = 2'000'000;

    /// Four-shell phantom (brain/CSF/skull/scalp at 78/80/86/92 mm).
    static LayeredSphereSpec four_layer(int refinement = 3);
    /// Single homogeneous ball of the given radius.
    static LayeredSphereSpec homogeneous(double radius, double sigma, int refinement = 3);

    /// Throws InvalidInput when radii are not strictly increasing, the
    /// tensors are not SPD, or the counts disagree.
    void validate() const;
};

/// Radially anisotropic tensor sigma_t I + (sigma_r - sigma_t) n n^T.
Mat3 radial_tensor(const Vec3& radial_direction, double sigma_radial, double sigma_tangential);

/// Tetrahedral mesh with per-element material data.
///
/// Immutable after construction; every query is safe to call concurrently.
class Mesh {
public:
    using Tet = std::array<int, 4>;

    Mesh() = default;
    Mesh(std::vector<Vec3> vertices, std::vector<Tet> tets, std::vector<int> labels,
         std::vector<Mat3> conductivity);

    std::size_t num_vertices() const { return vertices_.size(); }
    std::size_t num_elements() const { return tets_.size(); }

    const std::vector<Vec3>& vertices() const { return vertices_; }
    const std::vector<Tet>& tets() const { return tets_; }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<Mat3>& conductivity() const { return conductivity_; }
    const Vec3& vertex(int v) const { return vertices_[v]; }
    const Tet& tet(int e) const { return tets_[e]; }
    int label(int e) const { return labels_[e]; }
    const Mat3& sigma(int e) const { return conductivity_[e]; }
    double volume(int e) const { return volumes_[e]; }
    /// Gradients of the four barycentric (P1 hat) functions of element e, in 1/mm.
    const std::array<Vec3, 4>& grads(int e) const { return grads_[e]; }
    Vec3 centroid(int e) const;
    /// Mean edge length of element e.
    double edge_length(int e) const;

    /// Element across the face opposite local vertex i, or -1 on the boundary.
    int face_neighbor(int e, int i) const { return face_neighbors_[e][i]; }
    /// Elements incident to vertex v, ascending.
    std::span<const int> vertex_elements(int v) const;

    /// Barycentric coordinates of p with respect to element e.
    std::array<double, 4> barycentric(int e, const Vec3& p) const;

    struct Location {
        int element;
        std::array<double, 4> bary;
    };
    /// Lowest-index element containing p (barycentric coordinates within
    /// [-tol, 1 + tol]); throws OutsideMesh otherwise.
    Location locate(const Vec3& p, double tol = 1e-10) const;
    std::optional<Location> try_locate(const Vec3& p, double tol = 1e-10) const;

    /// Vertices on the outer boundary (faces without neighbour), ascending.
    std::vector<int> boundary_vertices() const;
    /// Returns a copy with every element tensor replaced.
    Mesh with_conductivity(std::vector<Mat3> conductivity) const;
    /// Returns a copy with all vertices mapped by x -> R x.
    Mesh rotated(const Mat3& rotation) const;

    /// Sectioned text format (`vertices`, `tetrahedra`, `labels`, `conductivity`).
    void write(std::ostream& os) const;
    static Mesh read(std::istream& is);

private:
    void build_geometry();
    void build_topology();
    void build_locator();

    std::vector<Vec3> vertices_;
    std::vector<Tet> tets_;
    std::vector<int> labels_;
    std::vector<Mat3> conductivity_;

    std::vector<double> volumes_;
    std::vector<std::array<Vec3, 4>> grads_;
    std::vector<std::array<int, 4>> face_neighbors_;
    std::vector<int> vertex_elem_offsets_;
    std::vector<int> vertex_elem_list_;

    // Uniform bins over the bounding box; each bin lists overlapping elements ascending.
    Vec3 bin_origin_ = Vec3::Zero();
    double bin_size_ = 1.0;
    std::array<int, 3> bin_dims_{0, 0, 0};
    std::vector<int> bin_offsets_;
    std::vector<int> bin_elements_;
};

/// Builds the mesh of a layered sphere: a structured cube grid mapped onto
/// the ball with an equal-angle cube-sphere map, with layer boundaries
/// placed exactly on grid shells.
///
/// Refinement r uses 2^(r+2) cells per half axis. Labels are layer indices
/// (0 = innermost).
Mesh build_layered_sphere_mesh(const LayeredSphereSpec& spec);

/// Replaces the tensors of every element labelled `label` by a radially
/// anisotropic tensor about the element-centroid direction, keeping the
/// geometric mean of the eigenvalues equal to the isotropic value.
Mesh apply_radial_anisotropy(const Mesh& mesh, int label, double isotropic_sigma,
                             double tangential_to_radial_ratio, const Vec3& center = Vec3::Zero());

/// Closed triangulated interface.
struct SurfaceTriangulation {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> normals;
    /// Mesh vertex index of each surface vertex.
    std::vector<int> mesh_vertex;

    bool empty() const { return triangles.empty(); }
    /// True when every edge is shared by exactly two triangles.
    bool is_watertight() const;
    /// V - E + F.
    int euler_characteristic() const;
};

/// Faces shared by one element labelled `inner` and one labelled `outer`,
/// oriented with normals pointing from inner to outer.
SurfaceTriangulation extract_interface_surface(const Mesh& mesh, int inner, int outer);
/// Boundary faces of the whole mesh, oriented outward.
SurfaceTriangulation extract_boundary_surface(const Mesh& mesh);

/// Unsigned distance from p to the closest point of triangle (a, b, c).
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Nearest-triangle distance queries with bounding-sphere pruning.
class SurfaceDistance {
public:
    explicit SurfaceDistance(SurfaceTriangulation surface);
    double operator()(const Vec3& p) const;
    const SurfaceTriangulation& surface() const { return surface_; }

private:
    SurfaceTriangulation surface_;
    std::vector<Vec3> centers_;
    std::vector<double> radii_;
};

/// Minimum Euclidean point-to-triangle distance (mm).
double depth_from_surface(const Vec3& p, const SurfaceTriangulation& surface);

}  // namespace fwdinv
