// Desk-scale replications of the two experiments: configuration, synthetic
// data, batch runs and their artifacts.
#pragma once

#include "fwdinv/fem.hpp"
#include "fwdinv/inverse.hpp"
#include "fwdinv/leadfield.hpp"
#include "fwdinv/mesh.hpp"
#include "fwdinv/metrics.hpp"
#include "fwdinv/source_models.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fwdinv {

struct ExperimentConfig {
    // [mesh]
    std::vector<double> radii{78.0, 80.0, 86.0, 92.0};
    std::vector<double> conductivities{0.33, 1.79, 0.01, 0.43};
    int refinement = 3;
    double anisotropy_ratio = 2.0;  // tangential : radial in the brain

    // [electrodes]
    int electrode_count = 60;
    double cap_polar_deg = 100.0;

    // [forward]
    double pcg_tol = 1e-9;
    std::string preconditioner = "ic";
    std::vector<std::string> source_models{"whitney-mpo", "hdiv", "localsub"};
    int localsub_rings = 1;
    double localsub_min_vertex_distance = 0.1;

    // [inverse]
    double snr_db = 20.0;  // also sets lambda for noiseless runs
    bool noise = true;     // false: noiseless Experiment II data
    double shal1r_penalty = 0.05;
    double shal1r_epsilon = 1e-2;
    int shal1r_max_iter = 8;
    double shal1r_tol = 1e-8;
    double skf_q = 1.0;
    double skf_r = 1.0;
    int skf_samples = 20;
    std::string skf_standardization = "posterior";

    // [sources]
    double bin_width_mm = 5.0;
    int sources_per_bin = 100;
    double height_min_mm = 0.0;
    double height_max_mm = 60.0;
    std::string orientation = "radial";

    // [metrics]
    std::string emd_weighting = "amplitude";
    std::string position_rule = "argmax";
    double centroid_threshold = 0.5;

    // [experiment1]
    double grid_spacing_mm = 8.0;
    int exp1_electrode = 0;
    double exp1_difference_tol = 1e-6;

    // [run]
    std::uint64_t seed = 1;
    unsigned threads = 1;
    std::string out_dir = "out";

    /// Throws InvalidInput on inconsistent values.
    void validate() const;
    /// Canonical sectioned text; parsing it yields an identical config.
    std::string to_ini() const;
    /// Copy with run-placement fields (threads, out) reset; results do not depend on them.
    ExperimentConfig canonical() const;
    /// FNV-1a 64 of canonical().to_ini(), as 16 hex digits.
    std::string hash() const;
};

/// Sectioned key-value file; unknown sections or keys are rejected.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);

/// Layered-sphere mesh and electrodes shared by every stage.
struct HeadModel {
    Mesh isotropic;
    Mesh anisotropic;
    ElectrodeSet electrodes;
    std::unique_ptr<SurfaceDistance> inner_skull;
    double lowest_electrode_z = 0.0;
    int brain_label = 0;
};

LayeredSphereSpec mesh_spec(const ExperimentConfig& config);
HeadModel build_head_model(const ExperimentConfig& config);
SolverOptions solver_options(const ExperimentConfig& config);
LeadFieldOptions leadfield_options(const ExperimentConfig& config);

/// Uniform sources per relative-height bin inside the brain, drawn until each
/// bin holds `sources_per_bin` positions that every source model accepts.
SourceSpace generate_depth_sweep_sources(const ExperimentConfig& config, const HeadModel& head, std::uint64_t seed);

/// Regular grid over the brain (offset from the mesh lattice), annotated.
SourceSpace generate_grid_sources(const ExperimentConfig& config, const HeadModel& head);

/// Unit moment for source p: radial, or tangential (horizontal, perpendicular to radial).
Vec3 source_moment(const ExperimentConfig& config, const Vec3& p);

/// Clean data L_j q replicated over `samples`, plus average-referenced white
/// noise at the requested SNR (none when snr_db is empty).
Measurement synthesize_measurement(const MatrixX& lead, std::size_t index, const Vec3& moment,
                                   std::optional<double> snr_db, std::uint64_t seed, int samples = 1);

/// Deterministic per-item seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

struct RunManifest {
    std::string experiment;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::vector<std::string> artifacts;  // relative to the output directory
    std::map<std::string, std::string> cells;  // "model/solver" -> "ok" or error text
    std::map<std::string, double> stage_seconds;
    bool ok = true;

    /// Deterministic JSON (no timings).
    std::string to_json() const;
};

using Logger = std::function<void(const std::string&)>;

RunManifest run_experiment_one(const ExperimentConfig& config, const std::filesystem::path& out, const Logger& log = {});
RunManifest run_experiment_two(const ExperimentConfig& config, const std::filesystem::path& out, const Logger& log = {});

/// Depth-bias and EMD-vs-depth SVGs for every (model, solver) group in a
/// metrics CSV. Returns the written paths.
std::vector<std::filesystem::path> emit_figures(const std::filesystem::path& metrics_csv,
                                                const std::filesystem::path& out_dir);

/// Writes the manifest (manifest.json) and wall-clock stages (timings.json).
void write_manifest(const RunManifest& manifest, const std::filesystem::path& out);

}  // namespace fwdinv
