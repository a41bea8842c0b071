#include "fwdinv/experiments.hpp"

#include "fwdinv/parallel.hpp"
#include "fwdinv/svg.hpp"
#include "fwdinv/textio.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace fwdinv {

namespace fs = std::filesystem;

// --- configuration -----------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
    return out;
}

std::string join(const std::vector<double>& values) {
    std::vector<std::string> s;
    for (double v : values) s.push_back(format_double(v));
    return join(s);
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw InvalidInput("expected a boolean, got '" + s + "'");
}

SkfParams::Standardization parse_skf_standardization(const std::string& s) {
    if (s == "posterior") return SkfParams::Standardization::PosteriorTrace;
    if (s == "explained") return SkfParams::Standardization::ExplainedTrace;
    throw InvalidInput("unknown skf_standardization '" + s + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
    if (radii.size() != conductivities.size() || radii.size() < 2)
        throw InvalidInput("radii and conductivities need matching lengths (at least 2 layers)");
    for (std::size_t i = 0; i < radii.size(); ++i) {
        if (!(radii[i] > 0.0) || (i > 0 && !(radii[i] > radii[i - 1])))
            throw InvalidInput("radii must be positive and strictly increasing");
        if (!(conductivities[i] > 0.0)) throw InvalidInput("conductivities must be positive");
    }
    if (refinement < 0 || refinement > 4) throw InvalidInput("refinement must be in [0, 4]");
    if (!(anisotropy_ratio > 0.0)) throw InvalidInput("anisotropy_ratio must be positive");
    if (electrode_count < 3) throw InvalidInput("need at least 3 electrodes");
    if (!(cap_polar_deg > 0.0 && cap_polar_deg <= 180.0)) throw InvalidInput("cap_polar_deg must be in (0, 180]");
    if (!(pcg_tol > 0.0 && pcg_tol < 1.0)) throw InvalidInput("pcg_tol must be in (0, 1)");
    if (preconditioner != "ic" && preconditioner != "jacobi") throw InvalidInput("preconditioner must be ic or jacobi");
    if (source_models.empty()) throw InvalidInput("no source models configured");
    std::set<std::string> seen;
    for (const auto& m : source_models) {
        parse_source_model(m);
        if (!seen.insert(m).second) throw InvalidInput("duplicate source model '" + m + "'");
    }
    if (localsub_rings < 1) throw InvalidInput("localsub_rings must be >= 1");
    if (!(localsub_min_vertex_distance >= 0.0)) throw InvalidInput("localsub_min_vertex_distance must be >= 0");
    if (!std::isfinite(snr_db)) throw InvalidInput("snr_db must be finite");
    if (!(shal1r_penalty > 0.0 && shal1r_penalty < 1.0)) throw InvalidInput("shal1r_penalty must be in (0, 1)");
    if (!(shal1r_epsilon > 0.0) || shal1r_max_iter < 1 || !(shal1r_tol > 0.0))
        throw InvalidInput("invalid shal1r parameters");
    if (!(skf_q > 0.0) || !(skf_r > 0.0) || skf_samples < 1) throw InvalidInput("invalid skf parameters");
    parse_skf_standardization(skf_standardization);
    if (!(bin_width_mm > 0.0) || sources_per_bin < 1 || !(height_max_mm > height_min_mm))
        throw InvalidInput("invalid depth-sweep parameters");
    if (orientation != "radial" && orientation != "tangential")
        throw InvalidInput("orientation must be radial or tangential");
    if (emd_weighting != "amplitude" && emd_weighting != "power")
        throw InvalidInput("emd_weighting must be amplitude or power");
    parse_position_rule(position_rule);
    if (!(centroid_threshold > 0.0 && centroid_threshold <= 1.0)) throw InvalidInput("centroid_threshold in (0, 1]");
    if (!(grid_spacing_mm > 0.0)) throw InvalidInput("grid_spacing_mm must be positive");
    if (exp1_electrode < 0 || exp1_electrode >= electrode_count) throw InvalidInput("exp1_electrode out of range");
    if (!(exp1_difference_tol >= 0.0)) throw InvalidInput("exp1_difference_tol must be >= 0");
}

std::string ExperimentConfig::to_ini() const {
    std::ostringstream os;
    os << "[mesh]\n"
       << "radii = " << join(radii) << "\n"
       << "conductivities = " << join(conductivities) << "\n"
       << "refinement = " << refinement << "\n"
       << "anisotropy_ratio = " << format_double(anisotropy_ratio) << "\n\n"
       << "[electrodes]\n"
       << "count = " << electrode_count << "\n"
       << "cap_polar_deg = " << format_double(cap_polar_deg) << "\n\n"
       << "[forward]\n"
       << "pcg_tol = " << format_double(pcg_tol) << "\n"
       << "preconditioner = " << preconditioner << "\n"
       << "source_models = " << join(source_models) << "\n"
       << "localsub_rings = " << localsub_rings << "\n"
       << "localsub_min_vertex_distance = " << format_double(localsub_min_vertex_distance) << "\n\n"
       << "[inverse]\n"
       << "snr_db = " << format_double(snr_db) << "\n"
       << "noise = " << (noise ? "true" : "false") << "\n"
       << "shal1r_penalty = " << format_double(shal1r_penalty) << "\n"
       << "shal1r_epsilon = " << format_double(shal1r_epsilon) << "\n"
       << "shal1r_max_iter = " << shal1r_max_iter << "\n"
       << "shal1r_tol = " << format_double(shal1r_tol) << "\n"
       << "skf_q = " << format_double(skf_q) << "\n"
       << "skf_r = " << format_double(skf_r) << "\n"
       << "skf_samples = " << skf_samples << "\n"
       << "skf_standardization = " << skf_standardization << "\n\n"
       << "[sources]\n"
       << "bin_width_mm = " << format_double(bin_width_mm) << "\n"
       << "per_bin = " << sources_per_bin << "\n"
       << "height_min_mm = " << format_double(height_min_mm) << "\n"
       << "height_max_mm = " << format_double(height_max_mm) << "\n"
       << "orientation = " << orientation << "\n\n"
       << "[metrics]\n"
       << "emd_weighting = " << emd_weighting << "\n"
       << "position_rule = " << position_rule << "\n"
       << "centroid_threshold = " << format_double(centroid_threshold) << "\n\n"
       << "[experiment1]\n"
       << "grid_spacing_mm = " << format_double(grid_spacing_mm) << "\n"
       << "electrode = " << exp1_electrode << "\n"
       << "difference_tol = " << format_double(exp1_difference_tol) << "\n\n"
       << "[run]\n"
       << "seed = " << seed << "\n"
       << "threads = " << threads << "\n"
       << "out = " << out_dir << "\n";
    return os.str();
}

ExperimentConfig ExperimentConfig::canonical() const {
    ExperimentConfig c = *this;
    c.threads = 1;
    c.out_dir = ".";
    return c;
}

std::string ExperimentConfig::hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : canonical().to_ini()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ExperimentConfig parse_config(const std::string& text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    using Setter = std::function<void(const std::string&)>;
    const std::map<std::string, std::map<std::string, Setter>> keys{
        {"mesh",
         {{"radii",
           [&](const std::string& v) {
               c.radii.clear();
               for (const auto& s : split_list(v)) c.radii.push_back(parse_double(s));
           }},
          {"conductivities",
           [&](const std::string& v) {
               c.conductivities.clear();
               for (const auto& s : split_list(v)) c.conductivities.push_back(parse_double(s));
           }},
          {"refinement", [&](const std::string& v) { c.refinement = parse_int(v); }},
          {"anisotropy_ratio", [&](const std::string& v) { c.anisotropy_ratio = parse_double(v); }}}},
        {"electrodes",
         {{"count", [&](const std::string& v) { c.electrode_count = parse_int(v); }},
          {"cap_polar_deg", [&](const std::string& v) { c.cap_polar_deg = parse_double(v); }}}},
        {"forward",
         {{"pcg_tol", [&](const std::string& v) { c.pcg_tol = parse_double(v); }},
          {"preconditioner", [&](const std::string& v) { c.preconditioner = v; }},
          {"source_models", [&](const std::string& v) { c.source_models = split_list(v); }},
          {"localsub_rings", [&](const std::string& v) { c.localsub_rings = parse_int(v); }},
          {"localsub_min_vertex_distance",
           [&](const std::string& v) { c.localsub_min_vertex_distance = parse_double(v); }}}},
        {"inverse",
         {{"snr_db", [&](const std::string& v) { c.snr_db = parse_double(v); }},
          {"noise", [&](const std::string& v) { c.noise = parse_bool(v); }},
          {"shal1r_penalty", [&](const std::string& v) { c.shal1r_penalty = parse_double(v); }},
          {"shal1r_epsilon", [&](const std::string& v) { c.shal1r_epsilon = parse_double(v); }},
          {"shal1r_max_iter", [&](const std::string& v) { c.shal1r_max_iter = parse_int(v); }},
          {"shal1r_tol", [&](const std::string& v) { c.shal1r_tol = parse_double(v); }},
          {"skf_q", [&](const std::string& v) { c.skf_q = parse_double(v); }},
          {"skf_r", [&](const std::string& v) { c.skf_r = parse_double(v); }},
          {"skf_samples", [&](const std::string& v) { c.skf_samples = parse_int(v); }},
          {"skf_standardization", [&](const std::string& v) { c.skf_standardization = v; }}}},
        {"sources",
         {{"bin_width_mm", [&](const std::string& v) { c.bin_width_mm = parse_double(v); }},
          {"per_bin", [&](const std::string& v) { c.sources_per_bin = parse_int(v); }},
          {"height_min_mm", [&](const std::string& v) { c.height_min_mm = parse_double(v); }},
          {"height_max_mm", [&](const std::string& v) { c.height_max_mm = parse_double(v); }},
          {"orientation", [&](const std::string& v) { c.orientation = v; }}}},
        {"metrics",
         {{"emd_weighting", [&](const std::string& v) { c.emd_weighting = v; }},
          {"position_rule", [&](const std::string& v) { c.position_rule = v; }},
          {"centroid_threshold", [&](const std::string& v) { c.centroid_threshold = parse_double(v); }}}},
        {"experiment1",
         {{"grid_spacing_mm", [&](const std::string& v) { c.grid_spacing_mm = parse_double(v); }},
          {"electrode", [&](const std::string& v) { c.exp1_electrode = parse_int(v); }},
          {"difference_tol", [&](const std::string& v) { c.exp1_difference_tol = parse_double(v); }}}},
        {"run",
         {{"seed", [&](const std::string& v) { c.seed = parse_u64(v); }},
          {"threads", [&](const std::string& v) { c.threads = static_cast<unsigned>(parse_int(v)); }},
          {"out", [&](const std::string& v) { c.out_dir = v; }}}},
    };
    for (const auto& [section, body] : tree) {
        auto sec = keys.find(section);
        if (sec == keys.end()) throw InvalidInput("config: unknown section [" + section + "]");
        if (body.empty() && !body.data().empty()) throw InvalidInput("config: key '" + section + "' outside a section");
        for (const auto& [key, value] : body) {
            auto k = sec->second.find(key);
            if (k == sec->second.end()) throw InvalidInput("config: unknown key " + section + "." + key);
            try {
                k->second(trim(value.data()));
            } catch (const Error& e) {
                throw InvalidInput("config: " + section + "." + key + ": " + e.what());
            }
        }
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// --- head model ----------------------------------------------------------------

LayeredSphereSpec mesh_spec(const ExperimentConfig& config) {
    LayeredSphereSpec spec;
    spec.radii = config.radii;
    for (double s : config.conductivities) spec.conductivity.push_back(s * Mat3::Identity());
    spec.refinement = config.refinement;
    return spec;
}

HeadModel build_head_model(const ExperimentConfig& config) {
    config.validate();
    HeadModel head;
    head.isotropic = build_layered_sphere_mesh(mesh_spec(config));
    head.brain_label = 0;
    head.anisotropic =
        apply_radial_anisotropy(head.isotropic, head.brain_label, config.conductivities[0], config.anisotropy_ratio);
    const auto requested =
        cap_electrode_positions(config.electrode_count, config.cap_polar_deg, config.radii.back());
    head.electrodes = attach_electrodes(head.isotropic, requested);
    head.lowest_electrode_z = head.electrodes.positions.front().z();
    for (const auto& p : head.electrodes.positions) head.lowest_electrode_z = std::min(head.lowest_electrode_z, p.z());
    // Inner skull: the interface between the compartment below the skull and the skull.
    const int skull = config.radii.size() >= 4 ? 2 : static_cast<int>(config.radii.size()) - 1;
    auto surface = extract_interface_surface(head.isotropic, skull - 1, skull);
    if (surface.empty()) throw InvalidInput("inner skull surface is empty");
    head.inner_skull = std::make_unique<SurfaceDistance>(std::move(surface));
    return head;
}

SolverOptions solver_options(const ExperimentConfig& config) {
    SolverOptions o;
    o.tol = config.pcg_tol;
    o.preconditioner = config.preconditioner == "ic" ? Preconditioner::IncompleteCholesky : Preconditioner::Jacobi;
    return o;
}

LeadFieldOptions leadfield_options(const ExperimentConfig& config) {
    LeadFieldOptions o;
    o.local_subtraction.rings = config.localsub_rings;
    o.local_subtraction.min_vertex_distance = config.localsub_min_vertex_distance;
    o.threads = config.threads;
    return o;
}

// --- sources and data ------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ stream) ^ index);
}

namespace {

bool inside_brain(const HeadModel& head, const Vec3& p) {
    auto loc = head.isotropic.try_locate(p);
    return loc && head.isotropic.label(loc->element) == head.brain_label;
}

// Every configured source model builds a load at p.
bool admissible(const ExperimentConfig& config, const HeadModel& head, const Vec3& p) {
    if (!inside_brain(head, p)) return false;
    if (!has_vertex_clearance(head.isotropic, p, config.localsub_min_vertex_distance)) return false;
    const auto ls = leadfield_options(config).local_subtraction;
    for (const auto& tag : config.source_models) {
        const SourceModel model = parse_source_model(tag);
        // Failures depend on geometry only, which both meshes share.
        try {
            if (model == SourceModel::LocalSubtraction) {
                if (local_subtraction_patch(head.isotropic, p, ls).touches(head.electrodes.vertices)) return false;
            } else {
                rhs_basis(head.isotropic, p, model);
            }
        } catch (const Error&) {
            return false;
        }
    }
    return true;
}

}  // namespace

SourceSpace generate_depth_sweep_sources(const ExperimentConfig& config, const HeadModel& head, std::uint64_t seed) {
    config.validate();
    const double r = config.radii[0];
    const int bins = static_cast<int>(std::lround((config.height_max_mm - config.height_min_mm) / config.bin_width_mm));
    if (bins < 1 || std::abs(bins * config.bin_width_mm - (config.height_max_mm - config.height_min_mm)) > 1e-9)
        throw InvalidInput("height range is not a whole number of bins");
    SourceSpace space;
    for (int b = 0; b < bins; ++b) {
        const double z0 = head.lowest_electrode_z + config.height_min_mm + b * config.bin_width_mm;
        const double z1 = z0 + config.bin_width_mm;
        if (z0 >= r || z1 <= -r) throw InvalidInput("height bin " + std::to_string(b) + " intersects no brain volume");
        std::mt19937_64 rng(derive_seed(seed, 1, static_cast<std::uint64_t>(b)));
        std::uniform_real_distribution<double> ux(-r, r), uz(std::max(z0, -r), std::min(z1, r));
        int found = 0;
        long attempts = 0;
        const long max_attempts = 2000L * config.sources_per_bin;
        while (found < config.sources_per_bin) {
            if (++attempts > max_attempts)
                throw InvalidInput("height bin " + std::to_string(b) + " intersects no usable brain volume");
            const double x = ux(rng), y = ux(rng), z = uz(rng);
            const Vec3 p(x, y, z);
            if (p.norm() >= r || z < z0 || z >= z1) continue;
            if (!admissible(config, head, p)) continue;
            space.positions.push_back(p);
            ++found;
        }
    }
    annotate_source_space(space, *head.inner_skull, head.lowest_electrode_z);
    return space;
}

SourceSpace generate_grid_sources(const ExperimentConfig& config, const HeadModel& head) {
    config.validate();
    const double h = config.grid_spacing_mm;
    const double r = config.radii[0];
    const int n = static_cast<int>(std::ceil(r / h)) + 1;
    SourceSpace space;
    // Half-spacing offset keeps grid points off the symmetry planes of the mesh lattice.
    for (int k = -n; k < n; ++k)
        for (int j = -n; j < n; ++j)
            for (int i = -n; i < n; ++i) {
                const Vec3 p((i + 0.5) * h, (j + 0.5) * h, (k + 0.5) * h);
                if (p.norm() >= r) continue;
                if (!admissible(config, head, p)) continue;
                space.positions.push_back(p);
            }
    if (space.positions.empty()) throw InvalidInput("grid source space is empty");
    annotate_source_space(space, *head.inner_skull, head.lowest_electrode_z);
    return space;
}

Vec3 source_moment(const ExperimentConfig& config, const Vec3& p) {
    const Vec3 radial = p.norm() > 1e-9 ? Vec3(p.normalized()) : Vec3::UnitZ();
    if (config.orientation == "radial") return radial;
    Vec3 t = Vec3::UnitZ().cross(radial);
    if (t.norm() < 1e-9) t = Vec3::UnitX();
    return t.normalized();
}

Measurement synthesize_measurement(const MatrixX& lead, std::size_t index, const Vec3& moment,
                                   std::optional<double> snr_db, std::uint64_t seed, int samples) {
    if (lead.cols() % 3 != 0) throw InvalidInput("lead field must have 3 columns per source");
    if (index >= static_cast<std::size_t>(lead.cols() / 3)) throw InvalidInput("source index out of range");
    if (samples < 1) throw InvalidInput("samples must be >= 1");
    const VectorX clean = lead.middleCols(static_cast<Eigen::Index>(3 * index), 3) * moment;
    const Eigen::Index m = clean.size();
    Measurement out;
    out.snr_db = snr_db;
    out.data = clean.replicate(1, samples);
    if (!snr_db) return out;
    const double power = clean.squaredNorm() / static_cast<double>(m);
    if (!(power > 0.0)) throw InvalidInput("zero clean signal with finite SNR");
    // Average referencing removes one degree of freedom; inflate so the
    // referenced noise keeps the requested power.
    const double variance = power / std::pow(10.0, *snr_db / 10.0) * static_cast<double>(m) / static_cast<double>(m - 1);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, std::sqrt(variance));
    for (int s = 0; s < samples; ++s) {
        VectorX noise(m);
        for (Eigen::Index i = 0; i < m; ++i) noise[i] = normal(rng);
        noise.array() -= noise.mean();
        out.data.col(s) += noise;
    }
    return out;
}

// --- manifests -------------------------------------------------------------------

std::string RunManifest::to_json() const {
    nlohmann::ordered_json j;
    j["experiment"] = experiment;
    j["config_hash"] = config_hash;
    j["seed"] = seed;
    j["ok"] = ok;
    j["artifacts"] = artifacts;
    nlohmann::ordered_json c = nlohmann::ordered_json::object();
    for (const auto& [k, v] : cells) c[k] = v;
    j["cells"] = c;
    return j.dump(2) + "\n";
}

void write_manifest(const RunManifest& manifest, const fs::path& out) {
    fs::create_directories(out);
    {
        std::ofstream os(out / "manifest.json", std::ios::binary);
        os << manifest.to_json();
        if (!os) throw Error("cannot write manifest.json");
    }
    nlohmann::ordered_json t = nlohmann::ordered_json::object();
    for (const auto& [k, v] : manifest.stage_seconds) t[k] = v;
    std::ofstream os(out / "timings.json", std::ios::binary);
    os << t.dump(2) << "\n";
    if (!os) throw Error("cannot write timings.json");
}

namespace {

class Stopwatch {
public:
    Stopwatch(RunManifest& manifest, std::string stage, const Logger& log)
        : manifest_(manifest), stage_(std::move(stage)), log_(log), start_(std::chrono::steady_clock::now()) {
        if (log_) log_("[" + stage_ + "] start");
    }
    ~Stopwatch() {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        manifest_.stage_seconds[stage_] += s;
        if (log_) log_("[" + stage_ + "] " + format_double(s, 4) + " s");
    }

private:
    RunManifest& manifest_;
    std::string stage_;
    const Logger& log_;
    std::chrono::steady_clock::time_point start_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
    if (!os) throw Error("cannot write " + path.string());
}

std::string rel_path(const fs::path& p, const fs::path& base) { return fs::relative(p, base).generic_string(); }

TransferMatrix build_transfer(const Mesh& mesh, const ExperimentConfig& config, const HeadModel& head) {
    const auto a = assemble_stiffness(mesh);
    return compute_transfer_matrix(a, head.electrodes, solver_options(config), config.threads);
}

double normalized_max_difference(const VectorX& a, const VectorX& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

VectorX max_normalized(VectorX v) {
    const double m = v.cwiseAbs().maxCoeff();
    if (m > 0.0) v /= m;
    return v;
}

}  // namespace

// --- Experiment I ------------------------------------------------------------------

RunManifest run_experiment_one(const ExperimentConfig& config, const fs::path& out, const Logger& log) {
    config.validate();
    if (config.source_models.size() < 2) throw InvalidInput("Experiment I needs at least two source models");
    RunManifest manifest;
    manifest.experiment = "exp1";
    manifest.config_hash = config.hash();
    manifest.seed = config.seed;
    fs::create_directories(out / "leadfields");
    fs::create_directories(out / "figures");
    write_text(out / "config.ini", config.canonical().to_ini());
    manifest.artifacts.push_back("config.ini");

    HeadModel head;
    {
        Stopwatch sw(manifest, "mesh", log);
        head = build_head_model(config);
    }
    SourceSpace space;
    {
        Stopwatch sw(manifest, "sources", log);
        space = generate_grid_sources(config, head);
    }
    save_source_space(space, out / "sources.csv");
    manifest.artifacts.push_back("sources.csv");

    // Most superficial source under the chosen electrode: nearest to it.
    const Vec3 electrode = head.electrodes.positions[static_cast<std::size_t>(config.exp1_electrode)];
    std::size_t target = 0;
    for (std::size_t j = 1; j < space.size(); ++j)
        if ((space.positions[j] - electrode).norm() < (space.positions[target] - electrode).norm()) target = j;
    if (space.depth_mm[target] > 10.0)
        throw InvalidInput("Experiment I source is deeper than 10 mm (" + format_double(space.depth_mm[target]) + ")");
    if (log) log("target source " + std::to_string(target) + " depth " + format_double(space.depth_mm[target], 4));

    TransferMatrix transfer;
    {
        Stopwatch sw(manifest, "transfer", log);
        transfer = build_transfer(head.anisotropic, config, head);
    }

    const std::vector<std::string> solvers{"sloreta", "shal1r", "skf", "ds"};
    const std::size_t n = space.size();
    std::map<std::pair<std::string, std::string>, VectorX> maps;  // (model, solver)
    std::ostringstream maps_csv;
    maps_csv << "source_model,solver,source_index,amplitude\n";

    for (const auto& tag : config.source_models) {
        const SourceModel model = parse_source_model(tag);
        LeadField lf;
        try {
            Stopwatch sw(manifest, "leadfield/" + tag, log);
            lf = build_leadfield(head.anisotropic, transfer, head.electrodes, space, model, "anisotropic",
                                 leadfield_options(config));
        } catch (const Error& e) {
            for (const auto& s : solvers) manifest.cells[tag + "/" + s] = std::string("leadfield: ") + e.what();
            manifest.ok = false;
            continue;
        }
        const auto lf_path = out / "leadfields" / (tag + ".lead");
        save_leadfield(lf, lf_path);
        manifest.artifacts.push_back(rel_path(lf_path, out));
        manifest.artifacts.push_back(rel_path(source_space_sidecar(lf_path), out));

        const Vec3 q = source_moment(config, space.positions[target]);
        const double lambda = select_lambda(lf.matrix, config.snr_db);
        for (const auto& solver : solvers) {
            const std::string cell = tag + "/" + solver;
            try {
                Stopwatch sw(manifest, "invert/" + cell, log);
                VectorX amp;
                if (solver == "sloreta") {
                    amp = sloreta(lf.matrix, synthesize_measurement(lf.matrix, target, q, std::nullopt, 0), lambda)
                              .final_amplitude();
                } else if (solver == "shal1r") {
                    Shal1rParams p;
                    p.lambda_std = lambda;
                    p.penalty = config.shal1r_penalty;
                    p.epsilon = config.shal1r_epsilon;
                    p.max_iter = config.shal1r_max_iter;
                    p.tol = config.shal1r_tol;
                    amp = shal1r(lf.matrix, synthesize_measurement(lf.matrix, target, q, std::nullopt, 0), p)
                              .final_amplitude();
                } else if (solver == "skf") {
                    SkfParams p;
                    p.q_evolution = config.skf_q;
                    p.r_noise = config.skf_r;
                    p.lambda_std = lambda;
                    p.standardization = parse_skf_standardization(config.skf_standardization);
                    amp = skf(lf.matrix,
                              synthesize_measurement(lf.matrix, target, q, std::nullopt, 0, config.skf_samples), p)
                              .final_amplitude();
                } else {
                    amp = dipole_scan(lf.matrix, synthesize_measurement(lf.matrix, target, q, std::nullopt, 0))
                              .reconstruction.final_amplitude();
                }
                if (!amp.allFinite() || amp.size() != static_cast<Eigen::Index>(n))
                    throw Error("non-finite or mis-sized amplitude map");
                amp = max_normalized(amp);
                for (std::size_t j = 0; j < n; ++j)
                    maps_csv << tag << ',' << solver << ',' << j << ',' << format_double(amp[static_cast<Eigen::Index>(j)])
                             << '\n';
                const auto svg_path = out / "figures" / ("map_" + tag + "_" + solver + ".svg");
                write_text(svg_path, svg::render_map("amplitude " + solver + " / " + tag, space.positions,
                                                     std::vector<double>(amp.data(), amp.data() + amp.size()), false));
                manifest.artifacts.push_back(rel_path(svg_path, out));
                maps[{tag, solver}] = std::move(amp);
                manifest.cells[cell] = "ok";
            } catch (const Error& e) {
                manifest.cells[cell] = e.what();
                manifest.ok = false;
                if (log) log("cell " + cell + " failed: " + e.what());
            }
        }
    }
    write_text(out / "maps.csv", maps_csv.str());
    manifest.artifacts.push_back("maps.csv");

    std::ostringstream diff_csv, summary_csv;
    diff_csv << "solver,model_a,model_b,source_index,difference\n";
    summary_csv << "solver,model_a,model_b,max_abs_difference,within_tol\n";
    for (const auto& solver : solvers)
        for (std::size_t a = 0; a < config.source_models.size(); ++a)
            for (std::size_t b = a + 1; b < config.source_models.size(); ++b) {
                const auto& ma = config.source_models[a];
                const auto& mb = config.source_models[b];
                auto ia = maps.find({ma, solver});
                auto ib = maps.find({mb, solver});
                if (ia == maps.end() || ib == maps.end()) continue;
                const VectorX d = ia->second - ib->second;
                for (std::size_t j = 0; j < n; ++j)
                    diff_csv << solver << ',' << ma << ',' << mb << ',' << j << ','
                             << format_double(d[static_cast<Eigen::Index>(j)]) << '\n';
                const double maxdiff = normalized_max_difference(ia->second, ib->second);
                summary_csv << solver << ',' << ma << ',' << mb << ',' << format_double(maxdiff) << ','
                            << (maxdiff <= config.exp1_difference_tol ? "true" : "false") << '\n';
                const auto svg_path = out / "figures" / ("diff_" + solver + "_" + ma + "_" + mb + ".svg");
                write_text(svg_path, svg::render_map(solver + ": " + ma + " minus " + mb, space.positions,
                                                     std::vector<double>(d.data(), d.data() + d.size()), true));
                manifest.artifacts.push_back(rel_path(svg_path, out));
            }
    write_text(out / "differences.csv", diff_csv.str());
    write_text(out / "difference_summary.csv", summary_csv.str());
    manifest.artifacts.push_back("differences.csv");
    manifest.artifacts.push_back("difference_summary.csv");
    manifest.artifacts.push_back("timings.json");
    write_manifest(manifest, out);
    return manifest;
}

// --- Experiment II -----------------------------------------------------------------

RunManifest run_experiment_two(const ExperimentConfig& config, const fs::path& out, const Logger& log) {
    config.validate();
    RunManifest manifest;
    manifest.experiment = "exp2";
    manifest.config_hash = config.hash();
    manifest.seed = config.seed;
    fs::create_directories(out / "leadfields");
    write_text(out / "config.ini", config.canonical().to_ini());
    manifest.artifacts.push_back("config.ini");

    HeadModel head;
    {
        Stopwatch sw(manifest, "mesh", log);
        head = build_head_model(config);
    }
    SourceSpace space;
    {
        Stopwatch sw(manifest, "sources", log);
        space = generate_depth_sweep_sources(config, head, config.seed);
    }
    save_source_space(space, out / "sources.csv");
    manifest.artifacts.push_back("sources.csv");
    if (log) log(std::to_string(space.size()) + " sources");

    TransferMatrix t_aniso, t_iso;
    {
        Stopwatch sw(manifest, "transfer/anisotropic", log);
        t_aniso = build_transfer(head.anisotropic, config, head);
    }
    {
        Stopwatch sw(manifest, "transfer/isotropic", log);
        t_iso = build_transfer(head.isotropic, config, head);
    }

    const std::vector<std::string> solvers{"sloreta", "shal1r"};
    const PositionRule rule = parse_position_rule(config.position_rule);
    const bool power = config.emd_weighting == "power";
    const std::size_t n = space.size();
    std::vector<MetricsRow> rows;
    std::ostringstream summary;
    summary << "source_model,solver,n,failures,slope,intercept,residual_std,median_emd_mm,spearman_emd_depth\n";

    for (const auto& tag : config.source_models) {
        const SourceModel model = parse_source_model(tag);
        LeadField forward, inverse;
        try {
            Stopwatch sw(manifest, "leadfield/" + tag, log);
            forward = build_leadfield(head.anisotropic, t_aniso, head.electrodes, space, model, "anisotropic",
                                      leadfield_options(config));
            inverse = build_leadfield(head.isotropic, t_iso, head.electrodes, space, model, "isotropic",
                                      leadfield_options(config));
        } catch (const Error& e) {
            for (const auto& s : solvers) manifest.cells[tag + "/" + s] = std::string("leadfield: ") + e.what();
            manifest.ok = false;
            continue;
        }
        if (forward.conductivity == inverse.conductivity) throw Error("forward and inverse lead fields coincide");
        for (const auto* lf : {&forward, &inverse}) {
            const auto path = out / "leadfields" / (tag + "_" + lf->conductivity + ".lead");
            save_leadfield(*lf, path);
            manifest.artifacts.push_back(rel_path(path, out));
            manifest.artifacts.push_back(rel_path(source_space_sidecar(path), out));
        }

        const double lambda = select_lambda(inverse.matrix, config.snr_db);
        std::unique_ptr<MinimumNormOperator> mn;
        std::unique_ptr<Shal1rOperator> sh;
        {
            Stopwatch sw(manifest, "operators/" + tag, log);
            mn = std::make_unique<MinimumNormOperator>(inverse.matrix, lambda);
            Shal1rParams p;
            p.lambda_std = lambda;
            p.penalty = config.shal1r_penalty;
            p.epsilon = config.shal1r_epsilon;
            p.max_iter = config.shal1r_max_iter;
            p.tol = config.shal1r_tol;
            sh = std::make_unique<Shal1rOperator>(inverse.matrix, p);
        }

        for (const auto& solver : solvers) {
            const std::string cell = tag + "/" + solver;
            Stopwatch sw(manifest, "invert/" + cell, log);
            std::vector<std::optional<MetricsRow>> results(n);
            std::vector<std::string> errors(n);
            parallel_for(n, config.threads, [&](std::size_t j) {
                try {
                    const Vec3 q = source_moment(config, space.positions[j]);
                    const auto snr = config.noise ? std::optional<double>(config.snr_db) : std::nullopt;
                    const auto meas = synthesize_measurement(forward.matrix, j, q, snr, derive_seed(config.seed, 2, j));
                    const Reconstruction rec = solver == "sloreta" ? mn->sloreta(meas) : sh->solve(meas);
                    const VectorX amp = rec.final_amplitude();
                    if (!amp.allFinite()) throw Error("non-finite amplitudes");
                    WeightedPointSet estimate{space.positions, {}};
                    estimate.weights.resize(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        const double a = amp[static_cast<Eigen::Index>(i)];
                        estimate.weights[i] = power ? a * a : a;
                    }
                    const Vec3 est = estimated_position(amp, space.positions, rule, config.centroid_threshold);
                    MetricsRow row;
                    row.solver = solver;
                    row.source_model = tag;
                    row.source_index = j;
                    row.true_depth_mm = space.depth_mm[j];
                    row.est_depth_mm = (*head.inner_skull)(est);
                    row.loc_err_mm = localization_error(space.positions[j], est);
                    row.emd_mm = emd_singleton(space.positions[j], estimate);
                    results[j] = row;
                } catch (const Error& e) {
                    errors[j] = e.what();
                }
            });
            std::vector<double> xs, ys, emds;
            std::size_t failures = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (!results[j]) {
                    ++failures;
                    if (log) log("source " + std::to_string(j) + " " + cell + " failed: " + errors[j]);
                    continue;
                }
                rows.push_back(*results[j]);
                xs.push_back(results[j]->true_depth_mm);
                ys.push_back(results[j]->est_depth_mm);
                emds.push_back(results[j]->emd_mm);
            }
            if (xs.size() < 3) {
                manifest.cells[cell] = "too few successful sources";
                manifest.ok = false;
                continue;
            }
            const auto reg = depth_bias_regression(xs, ys);
            summary << tag << ',' << solver << ',' << xs.size() << ',' << failures << ',' << format_double(reg.slope)
                    << ',' << format_double(reg.intercept) << ',' << format_double(reg.residual_std) << ','
                    << format_double(median(emds)) << ',' << format_double(spearman(xs, emds)) << '\n';
            manifest.cells[cell] = failures == 0 ? "ok" : "ok (" + std::to_string(failures) + " failed sources)";
            if (log)
                log(cell + ": slope " + format_double(reg.slope, 4) + ", median EMD " + format_double(median(emds), 4) +
                    " mm, spearman " + format_double(spearman(xs, emds), 4));
        }
    }
    write_metrics_csv(rows, out / "metrics.csv");
    manifest.artifacts.push_back("metrics.csv");
    write_text(out / "summary.csv", summary.str());
    manifest.artifacts.push_back("summary.csv");
    if (!rows.empty()) {
        Stopwatch sw(manifest, "figures", log);
        for (const auto& p : emit_figures(out / "metrics.csv", out / "figures"))
            manifest.artifacts.push_back(rel_path(p, out));
    }
    manifest.artifacts.push_back("timings.json");
    write_manifest(manifest, out);
    return manifest;
}

// --- figures -----------------------------------------------------------------------

std::vector<fs::path> emit_figures(const fs::path& metrics_csv, const fs::path& out_dir) {
    const auto rows = read_metrics_csv(metrics_csv);
    if (rows.empty()) throw InvalidInput("no metric rows in " + metrics_csv.string());
    // Groups in first-appearance order.
    std::vector<std::pair<std::string, std::string>> order;
    std::map<std::pair<std::string, std::string>, std::vector<const MetricsRow*>> groups;
    for (const auto& r : rows) {
        const auto key = std::make_pair(r.source_model, r.solver);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&r);
    }
    std::vector<std::pair<fs::path, std::string>> pending;
    for (const auto& key : order) {
        const auto& g = groups[key];
        std::vector<double> x, y, e;
        for (const auto* r : g) {
            x.push_back(r->true_depth_mm);
            y.push_back(r->est_depth_mm);
            e.push_back(r->emd_mm);
        }
        const std::string name = key.first + "_" + key.second;
        for (int kind = 0; kind < 2; ++kind) {
            const auto& yy = kind == 0 ? y : e;
            svg::ScatterPlot plot;
            plot.title = (kind == 0 ? "depth bias, " : "EMD vs depth, ") + key.second + " / " + key.first;
            plot.xlabel = "true depth (mm)";
            plot.ylabel = kind == 0 ? "estimated depth (mm)" : "EMD (mm)";
            for (std::size_t i = 0; i < x.size(); ++i) plot.points.emplace_back(x[i], yy[i]);
            plot.identity_line = kind == 0;
            if (x.size() >= 3) {
                try {
                    const auto reg = depth_bias_regression(x, yy);
                    plot.has_regression = true;
                    plot.slope = reg.slope;
                    plot.intercept = reg.intercept;
                    plot.band_x = reg.grid;
                    plot.band_lower = reg.lower;
                    plot.band_upper = reg.upper;
                    for (auto& v : plot.band_lower) v = std::max(v, 0.0);
                    for (auto& v : plot.band_upper) v = std::max(v, 0.0);
                } catch (const InvalidInput&) {
                    // degenerate x spread: scatter only
                }
            }
            pending.emplace_back(out_dir / ((kind == 0 ? "depth_bias_" : "emd_") + name + ".svg"), svg::render(plot));
        }
    }
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (const auto& [path, text] : pending) {
        write_text(path, text);
        written.push_back(path);
    }
    return written;
}

}  // namespace fwdinv
