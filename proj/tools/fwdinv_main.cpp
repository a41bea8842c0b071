// fwdinv: batch front end for meshing, lead fields, experiments, metrics and plots.
#include "fwdinv/experiments.hpp"
#include "fwdinv/textio.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace fwdinv;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<unsigned> threads;
};

ExperimentConfig resolve_config(const Globals& g) {
    ExperimentConfig c = g.config.empty() ? ExperimentConfig{} : load_config(g.config);
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.out_dir = *g.out;
    if (g.threads) c.threads = *g.threads;
    c.validate();
    return c;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// CSV `x,y,z,weight` with a header line.
WeightedPointSet read_point_set(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "x,y,z,weight")
        throw FormatError(path.string() + ": expected header x,y,z,weight");
    WeightedPointSet set;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string item;
        while (std::getline(ls, item, ',')) f.push_back(item);
        if (f.size() != 4) throw FormatError(path.string() + ": expected 4 fields: " + line);
        set.positions.emplace_back(parse_double(f[0]), parse_double(f[1]), parse_double(f[2]));
        set.weights.push_back(parse_double(f[3]));
    }
    set.validate();
    return set;
}

int cmd_mesh_build(const Globals& g) {
    const auto c = resolve_config(g);
    const fs::path out = c.out_dir;
    fs::create_directories(out);
    const HeadModel head = build_head_model(c);
    for (const auto& [name, mesh] : {std::pair<std::string, const Mesh*>{"mesh_isotropic.txt", &head.isotropic},
                                     {"mesh_anisotropic.txt", &head.anisotropic}}) {
        std::ofstream os(out / name);
        mesh->write(os);
        if (!os) throw Error("cannot write " + (out / name).string());
    }
    std::ofstream os(out / "electrodes.csv");
    os << "index,vertex,x,y,z\n";
    for (std::size_t i = 0; i < head.electrodes.size(); ++i) {
        const auto& p = head.electrodes.positions[i];
        os << i << ',' << head.electrodes.vertices[i] << ',' << format_double(p.x()) << ',' << format_double(p.y())
           << ',' << format_double(p.z()) << '\n';
    }
    std::cout << head.isotropic.num_vertices() << " vertices, " << head.isotropic.num_elements() << " elements\n";
    return 0;
}

int cmd_leadfield_build(const Globals& g, const std::string& model_tag, const std::string& conductivity,
                        const std::string& sources) {
    const auto c = resolve_config(g);
    const fs::path out = c.out_dir;
    fs::create_directories(out);
    const SourceModel model = parse_source_model(model_tag);
    if (conductivity != "isotropic" && conductivity != "anisotropic")
        throw InvalidInput("--conductivity must be isotropic or anisotropic");
    const HeadModel head = build_head_model(c);
    const Mesh& mesh = conductivity == "isotropic" ? head.isotropic : head.anisotropic;
    SourceSpace space;
    if (sources.empty()) {
        space = generate_depth_sweep_sources(c, head, c.seed);
    } else {
        space = load_source_space(sources);
        annotate_source_space(space, *head.inner_skull, head.lowest_electrode_z);
    }
    const auto transfer = compute_transfer_matrix(assemble_stiffness(mesh), head.electrodes, solver_options(c), c.threads);
    save_transfer_matrix(transfer, out / ("transfer_" + conductivity + ".tmat"));
    const auto lf = build_leadfield(mesh, transfer, head.electrodes, space, model, conductivity, leadfield_options(c));
    const auto path = out / (model_tag + "_" + conductivity + ".lead");
    save_leadfield(lf, path);
    std::cout << path.string() << ": " << lf.num_electrodes() << " electrodes x " << lf.num_sources() << " sources\n";
    return 0;
}

int report(const RunManifest& m, const fs::path& out) {
    std::cout << "manifest: " << (out / "manifest.json").string() << "\n";
    for (const auto& [cell, status] : m.cells) std::cout << "  " << cell << ": " << status << "\n";
    return m.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EEG forward/inverse workbench on layered-sphere head models"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "Sectioned key-value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (0 = all cores)");

    auto* mesh = app.add_subcommand("mesh", "Head-model meshes")->require_subcommand(1);
    auto* mesh_build = mesh->add_subcommand("build", "Write the isotropic and anisotropic meshes and electrodes");

    auto* lead = app.add_subcommand("leadfield", "Lead fields")->require_subcommand(1);
    auto* lead_build = lead->add_subcommand("build", "Build one lead field (and its transfer matrix)");
    std::string model_tag = "whitney-mpo", conductivity = "isotropic", sources;
    lead_build->add_option("--model", model_tag, "Source model tag (pi, whitney-pbo, whitney-mpo, hdiv, localsub)");
    lead_build->add_option("--conductivity", conductivity, "isotropic or anisotropic");
    lead_build->add_option("--sources", sources, "Source-space CSV (default: depth sweep)")->check(CLI::ExistingFile);

    auto* exp1 = app.add_subcommand("exp1", "Experiment I")->require_subcommand(1);
    auto* exp1_run = exp1->add_subcommand("run", "Superficial source under inverse crime, all solvers");
    auto* exp2 = app.add_subcommand("exp2", "Experiment II")->require_subcommand(1);
    auto* exp2_run = exp2->add_subcommand("run", "Depth sweep with anisotropic forward and isotropic inverse");

    auto* metrics = app.add_subcommand("metrics", "Metrics")->require_subcommand(1);
    auto* metrics_emd = metrics->add_subcommand("emd", "EMD between two weighted point sets (CSV x,y,z,weight)");
    std::string emd_a, emd_b;
    metrics_emd->add_option("a", emd_a)->required()->check(CLI::ExistingFile);
    metrics_emd->add_option("b", emd_b)->required()->check(CLI::ExistingFile);

    auto* plot = app.add_subcommand("plot", "Figures from a metrics CSV");
    std::string metrics_csv;
    plot->add_option("--metrics", metrics_csv, "Metrics CSV")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*mesh_build) return cmd_mesh_build(g);
        if (*lead_build) return cmd_leadfield_build(g, model_tag, conductivity, sources);
        if (*exp1_run) {
            const auto c = resolve_config(g);
            return report(run_experiment_one(c, c.out_dir, log_line), c.out_dir);
        }
        if (*exp2_run) {
            const auto c = resolve_config(g);
            return report(run_experiment_two(c, c.out_dir, log_line), c.out_dir);
        }
        if (*metrics_emd) {
            const auto r = emd(read_point_set(emd_a), read_point_set(emd_b));
            std::cout << format_double(r.distance) << "\n";
            return 0;
        }
        if (*plot) {
            const auto c = resolve_config(g);
            for (const auto& p : emit_figures(metrics_csv, fs::path(c.out_dir) / "figures"))
                std::cout << p.string() << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
