#include "phenoscope/cli.hpp"

#include "phenoscope/error.hpp"
#include "phenoscope/pipeline.hpp"
#include "phenoscope/service.hpp"
#include "phenoscope/synth.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <sstream>

namespace phenoscope::cli {

namespace {

std::set<int> parse_int_set(const std::string& csv) {
    std::set<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw CLI::ValidationError("--kept", "'" + item + "' is not an integer");
        out.insert(v);
    }
    return out;
}

std::vector<std::string> split(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

const auto kSpace = CLI::IsMember({"raw", "pca"});

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"phenoscope: unsupervised phenotypic profiling of cell images"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "Worker thread cap")->check(CLI::PositiveNumber);

    pipeline::IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Validate a manifest and create a run directory");
    c_ingest->add_option("--manifest", ingest.manifest, "Manifest CSV")->required();
    c_ingest->add_option("--preprocess", ingest.preprocess, "Preprocessing JSON");
    c_ingest->add_option("--out", ingest.run, "Run directory")->required();
    bool no_check = false;
    c_ingest->add_flag("--no-check-images", no_check, "Skip decoding every image");

    pipeline::ExtractArgs extract;
    auto* c_extract = app.add_subcommand("extract", "Compute CNN features for every image");
    c_extract->add_option("--run", extract.run)->required();
    c_extract->add_option("--model", extract.model, "ONNX model file")->required();
    c_extract->add_option("--taps", extract.taps, "conv ordinal:channels list")->capture_default_str();
    c_extract->add_option("--batch", extract.batch, "Images per work unit")->capture_default_str()->check(CLI::PositiveNumber);
    c_extract->add_option("--model-sha256", extract.model_sha256, "Expected model checksum");
    c_extract->add_flag("--skip-failures", extract.skip_failures, "Drop undecodable images instead of failing");

    pipeline::ReduceArgs reduce;
    auto* c_reduce = app.add_subcommand("reduce", "Fit PCA on the feature matrix");
    c_reduce->add_option("--run", reduce.run)->required();
    c_reduce->add_option("--pca-dims", reduce.pca_dims, "Number of components")->capture_default_str()->check(CLI::PositiveNumber);
    c_reduce->add_flag("--standardize", reduce.standardize, "z-score columns before PCA and clustering");

    pipeline::ClusterArgs cluster;
    auto* c_cluster = app.add_subcommand("cluster", "k-means phenotype clustering");
    c_cluster->add_option("--run", cluster.run)->required();
    c_cluster->add_option("--k", cluster.k, "Number of clusters")->capture_default_str()->check(CLI::PositiveNumber);
    c_cluster->add_option("--space", cluster.space, "raw | pca")->capture_default_str()->check(kSpace);
    c_cluster->add_option("--seed", cluster.seed, "")->capture_default_str();
    c_cluster->add_option("--restarts", cluster.restarts, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_cluster->add_option("--max-iter", cluster.max_iter, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_cluster->add_option("--tol", cluster.tol, "")->capture_default_str()->check(CLI::NonNegativeNumber);

    pipeline::ElbowArgs elbow;
    auto* c_elbow = app.add_subcommand("elbow", "Mean intra-cluster variance over a range of k");
    c_elbow->add_option("--run", elbow.run)->required();
    c_elbow->add_option("--k-min", elbow.k_min, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_elbow->add_option("--k-max", elbow.k_max, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_elbow->add_option("--step", elbow.step, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_elbow->add_option("--space", elbow.space, "raw | pca")->capture_default_str()->check(kSpace);
    c_elbow->add_option("--seed", elbow.seed, "")->capture_default_str();
    c_elbow->add_option("--restarts", elbow.restarts, "")->capture_default_str()->check(CLI::PositiveNumber);

    pipeline::TsneArgs tsne;
    auto* c_tsne = app.add_subcommand("tsne", "2-D t-SNE layout of the PCA scores");
    c_tsne->add_option("--run", tsne.run)->required();
    c_tsne->add_option("--perplexity", tsne.perplexity, "")->capture_default_str()->check(CLI::PositiveNumber);
    c_tsne->add_option("--seed", tsne.seed, "")->capture_default_str();
    c_tsne->add_option("--iters", tsne.iters, "")->capture_default_str()->check(CLI::PositiveNumber);

    pipeline::MetricsArgs metrics;
    std::string group_by = "well,chem_cluster";
    std::string kept;
    auto* c_metrics = app.add_subcommand("metrics", "Variance validation and fold reduction");
    c_metrics->add_option("--run", metrics.run)->required();
    c_metrics->add_option("--group-by", group_by, "Comma-separated groupings")->capture_default_str();
    c_metrics->add_option("--kept", kept, "Kept cluster ids, e.g. 4,6 (default: triage keep decisions)");
    c_metrics->add_option("--space", metrics.space, "raw | pca")->capture_default_str()->check(kSpace);
    c_metrics->add_option("--explained-threshold", metrics.explained_threshold, "")->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));

    fs::path synth_config;
    fs::path synth_out;
    auto* c_synth = app.add_subcommand("synth", "Render a synthetic screen with known phenotypes");
    c_synth->add_option("--config", synth_config)->required();
    c_synth->add_option("--out", synth_out)->required();

    fs::path serve_run;
    int port = 8080;
    std::string bind = "127.0.0.1";
    std::optional<fs::path> ui_dir;
    auto* c_serve = app.add_subcommand("serve", "Serve the triage API for a run");
    c_serve->add_option("--run", serve_run)->required()->check(CLI::ExistingDirectory);
    c_serve->add_option("--port", port, "")->capture_default_str()->check(CLI::Range(0, 65535));
    c_serve->add_option("--bind", bind, "")->capture_default_str();
    c_serve->add_option("--ui-dir", ui_dir, "Static UI assets")->check(CLI::ExistingDirectory);

    fs::path export_run;
    fs::path export_out = "export.csv";
    auto* c_export = app.add_subcommand("export", "Write compounds of kept clusters as CSV");
    c_export->add_option("--run", export_run)->required();
    c_export->add_option("--out", export_out, "Output path relative to --run")->capture_default_str();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
        if (c_metrics->parsed()) {
            metrics.group_by = split(group_by);
            if (!kept.empty()) metrics.kept = parse_int_set(kept);
        }
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const CLI::App* sub = nullptr;
        for (const auto* s : app.get_subcommands()) sub = s;
        err << (sub ? sub->help() : app.help());
        return kExitUsage;
    }

    try {
        if (c_ingest->parsed()) {
            ingest.check_images = !no_check;
            const auto m = pipeline::ingest(ingest);
            out << "ingested " << parse_manifest(ingest.run / "manifest.csv").size() << " images into "
                << ingest.run.string() << " (run " << m.run_id << ")\n";
        } else if (c_extract->parsed()) {
            extract.threads = threads;
            const auto m = pipeline::extract(extract);
            out << "features: " << m.properties.at("feature_dim") << " dims, taps " << m.properties.at("taps")
                << ", skipped " << m.properties.at("skipped_records") << "\n";
        } else if (c_reduce->parsed()) {
            pipeline::reduce(reduce);
            const PcaModel p = load_pca(reduce.run);
            out << "pca: " << p.n_components() << " components, explained variance "
                << p.explained_variance_ratio.sum() << "\n";
        } else if (c_cluster->parsed()) {
            pipeline::cluster(cluster);
            const ClusterModel m = load_clusters(cluster.run);
            out << "k-means: k=" << m.k << " inertia " << m.inertia << " after " << m.iterations << " iterations\n";
        } else if (c_elbow->parsed()) {
            const auto curve = pipeline::elbow(elbow);
            out << "k\tmean_intra_cluster_variance\tinertia\n";
            for (const auto& p : curve)
                out << p.k << '\t' << p.mean_intra_cluster_variance << '\t' << p.inertia << '\n';
        } else if (c_tsne->parsed()) {
            pipeline::tsne(tsne);
            const TsneLayout l = load_tsne(tsne.run);
            out << "t-SNE: perplexity " << l.perplexity << ", final KL " << l.kl_final << "\n";
        } else if (c_metrics->parsed()) {
            out << pipeline::metrics(metrics).dump(2) << "\n";
        } else if (c_synth->parsed()) {
            SynthConfig cfg = SynthConfig::load(synth_config);
            cfg.threads = threads;
            const fs::path manifest = generate_screen(cfg, synth_out);
            out << "wrote " << cfg.total_images() << " images; manifest " << manifest.string() << "\n";
        } else if (c_serve->parsed()) {
            serve(serve_run, bind, port, ui_dir);
        } else if (c_export->parsed()) {
            const RunManifest m = load_run(export_run);
            if (!m.done(Stage::Cluster)) {
                require_stages_done(m, Stage::Cluster);
                throw Error(Errc::StageOrderViolation, "export requires 'cluster' to be done");
            }
            const auto records = pipeline::run_records(export_run);
            const ClusterModel model = load_clusters(export_run);
            const auto result = pipeline::export_kept(records, model.assignments, model.k, load_triage(export_run).kept());
            const fs::path dest = export_run / export_out;
            if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
            atomic_write(dest, result.csv());
            out << "exported " << result.rows.size() << " compounds to " << dest.string() << "; fold reduction ";
            if (result.fold_reduction) out << *result.fold_reduction << "\n";
            else out << "null\n";
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace phenoscope::cli
