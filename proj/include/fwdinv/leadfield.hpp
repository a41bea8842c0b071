// Lead fields: transfer matrix times source-model loads over a source space.
#pragma once

#include "fwdinv/core.hpp"
#include "fwdinv/fem.hpp"
#include "fwdinv/mesh.hpp"
#include "fwdinv/source_models.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace fwdinv {

/// Ordered source positions with per-source depth below the inner skull
/// and height above the lowest electrode (both mm).
struct SourceSpace {
    std::vector<Vec3> positions;
    std::vector<double> depth_mm;
    std::vector<double> relheight_mm;

    std::size_t size() const { return positions.size(); }
    /// Throws InvalidInput when the per-source columns differ in length.
    void validate() const;
    bool operator==(const SourceSpace&) const = default;
};

/// CSV with header `index,x,y,z,depth_mm,relheight_mm`.
void save_source_space(const SourceSpace& space, const std::filesystem::path& path);
SourceSpace load_source_space(const std::filesystem::path& path);

/// Fills depth_mm from the surface and relheight_mm from the lowest electrode z.
void annotate_source_space(SourceSpace& space, const SurfaceDistance& inner_skull, double lowest_electrode_z);

/// L with rows = electrodes, columns = 3 Cartesian components per source
/// (source-major: column 3j + a).
struct LeadField {
    MatrixX matrix;
    SourceModel model = SourceModel::PartialIntegration;
    std::string conductivity;  // "isotropic" or "anisotropic"
    SourceSpace space;

    std::size_t num_sources() const { return static_cast<std::size_t>(matrix.cols() / 3); }
    std::size_t num_electrodes() const { return static_cast<std::size_t>(matrix.rows()); }
    auto block(std::size_t j) const { return matrix.middleCols(static_cast<Eigen::Index>(3 * j), 3); }
};

struct LeadFieldOptions {
    LocalSubtractionOptions local_subtraction{};
    unsigned threads = 1;
};

/// Raised when any source fails; lists every failing index.
class LeadFieldBuildError : public Error {
public:
    LeadFieldBuildError(const std::string& what, std::vector<std::size_t> failed)
        : Error(what), failed_sources(std::move(failed)) {}
    std::vector<std::size_t> failed_sources;
};

/// Column 3j + a = T^T rhs_model(p_j, e_a). Local-subtraction patches must
/// not reach an electrode vertex.
LeadField build_leadfield(const Mesh& mesh, const TransferMatrix& transfer, const ElectrodeSet& electrodes,
                          const SourceSpace& space, SourceModel model, const std::string& conductivity,
                          const LeadFieldOptions& options = {});

/// Frobenius norm of each source's 3-column block.
std::vector<double> column_norm_map(const LeadField& lf);

/// Values above the nearest-rank q-quantile are replaced by it.
std::vector<double> quantile_clip(std::vector<double> field, double q);
/// Nearest-rank quantile: the ceil(q n)-th smallest value.
double nearest_rank_quantile(std::vector<double> values, double q);

/// Binary `LEAD` file plus a sibling `<stem>.sources.csv`.
void save_leadfield(const LeadField& lf, const std::filesystem::path& path);
LeadField load_leadfield(const std::filesystem::path& path);
std::filesystem::path source_space_sidecar(const std::filesystem::path& leadfield_path);

}  // namespace fwdinv
