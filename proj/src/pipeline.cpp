#include "phenoscope/pipeline.hpp"

#include "phenoscope/error.hpp"
#include "phenoscope/hash.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace phenoscope::pipeline {

namespace {

RunManifest require(const fs::path& run, Stage stage) {
    if (!fs::exists(run / "run.json"))
        throw Error(Errc::StageOrderViolation, "stage '" + std::string(stage_name(stage)) + "' requires '" +
                                                   std::string(stage_name(upstream_of(stage).empty()
                                                                              ? Stage::Ingest
                                                                              : upstream_of(stage).front())) +
                                                   "' to be done (no run.json in " + run.string() + ")");
    RunManifest m = load_run(run);
    require_stages_done(m, stage);
    return m;
}

FeatureMatrix load_features(const fs::path& run, const RunManifest& m) {
    auto it = m.config_hashes.find("features.phn");
    return read_matrix(run / "features.phn",
                       it == m.config_hashes.end() ? std::nullopt : std::optional<std::string>(it->second));
}

std::string property(const RunManifest& m, const std::string& key, const std::string& dflt = "") {
    auto it = m.properties.find(key);
    return it == m.properties.end() ? dflt : it->second;
}

template <typename F>
RunManifest run_stage(const fs::path& run, Stage stage, F&& body) {
    try {
        return body();
    } catch (const Error& e) {
        if (e.code() != Errc::StageOrderViolation && fs::exists(run / "run.json"))
            update_stage(run, stage, StageStatus::Failed);
        throw;
    }
}

}  // namespace

RunManifest ingest(const IngestArgs& args) {
    const auto records = parse_manifest(args.manifest);
    const PreprocessConfig cfg = args.preprocess ? PreprocessConfig::load(*args.preprocess) : PreprocessConfig{};
    const fs::path root = fs::absolute(args.manifest).parent_path();
    if (args.check_images)
        for (const auto& r : records) {
            try {
                (void)load_and_preprocess(r, cfg, root);
            } catch (const Error& e) {
                throw Error(e.code(), r.key().str() + ": " + e.detail());
            }
        }
    load_run(args.run);
    return run_stage(args.run, Stage::Ingest, [&] {
        write_manifest(args.run / "manifest.csv", records);
        const std::string cfg_text = cfg.to_json_text() + "\n";
        atomic_write(args.run / "preprocess.json", cfg_text);
        return update_stage(args.run, Stage::Ingest, StageStatus::Done,
                            {{"manifest.csv", sha256_file(args.run / "manifest.csv")},
                             {"preprocess.json", sha256_hex(cfg_text)}},
                            {{"image_root", root.string()}});
    });
}

std::vector<ImageRecord> run_records(const fs::path& run) {
    auto records = parse_manifest(run / "manifest.csv");
    const fs::path rows = run / "rows.json";
    if (!fs::exists(rows)) return records;
    const auto ids = row_ids_from_json(load_json(rows));
    std::map<RowKey, std::size_t> index;
    for (std::size_t i = 0; i < records.size(); ++i) index[records[i].key()] = i;
    std::vector<ImageRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) throw Error(Errc::CorruptFile, "rows.json lists unknown row " + id.str());
        out.push_back(records[it->second]);
    }
    return out;
}

RunManifest extract(const ExtractArgs& args) {
    const RunManifest m = require(args.run, Stage::Extract);
    return run_stage(args.run, Stage::Extract, [&] {
        verify_artifact(args.run, m, "manifest.csv");
        verify_artifact(args.run, m, "preprocess.json");
        const auto records = parse_manifest(args.run / "manifest.csv");
        const auto cfg = PreprocessConfig::load(args.run / "preprocess.json");
        const Network net = Network::load(args.model, TapSpec::parse(args.taps), args.model_sha256);
        ExtractOptions opts;
        opts.batch = args.batch;
        opts.threads = args.threads;
        opts.skip_failures = args.skip_failures;
        const auto result = extract_features(net, records, cfg, property(m, "image_root"), opts);
        const std::string digest = write_matrix(args.run / "features.phn", result.features);
        return update_stage(args.run, Stage::Extract, StageStatus::Done,
                            {{"features.phn", digest}, {"rows.json", sha256_file(args.run / "rows.json")}},
                            {{"model", fs::absolute(args.model).string()},
                             {"model_sha256", net.sha256()},
                             {"taps", net.taps().str()},
                             {"feature_dim", std::to_string(net.feature_dim())},
                             {"skipped_records", std::to_string(result.failures.size())}});
    });
}

RunManifest reduce(const ReduceArgs& args) {
    const RunManifest m = require(args.run, Stage::Reduce);
    return run_stage(args.run, Stage::Reduce, [&] {
        const FeatureMatrix fm = load_features(args.run, m);
        const RowMatrixXd X = args.standardize ? zscore_columns(fm.values) : RowMatrixXd(fm.values.cast<double>());
        const PcaModel model = fit_pca(X, args.pca_dims);
        FeatureMatrix reduced;
        reduced.values = transform_pca(model, X).cast<float>();
        reduced.row_ids = fm.row_ids;
        const std::string pca_digest = save_pca(args.run, model);
        const std::string red_digest = write_matrix(args.run / "reduced.phn", reduced);
        return update_stage(args.run, Stage::Reduce, StageStatus::Done,
                            {{"pca.json", pca_digest}, {"reduced.phn", red_digest}},
                            {{"standardize", args.standardize ? "true" : "false"},
                             {"pca_dims", std::to_string(args.pca_dims)}});
    });
}

RowMatrixXd load_space(const fs::path& run, const RunManifest& m, const std::string& space) {
    if (space == "pca") {
        auto it = m.config_hashes.find("reduced.phn");
        return read_matrix(run / "reduced.phn",
                           it == m.config_hashes.end() ? std::nullopt : std::optional<std::string>(it->second))
            .values.cast<double>();
    }
    if (space != "raw") throw Error(Errc::InvalidArgument, "space must be raw or pca, got '" + space + "'");
    const FeatureMatrix fm = load_features(run, m);
    if (property(m, "standardize") == "true") return zscore_columns(fm.values);
    return fm.values.cast<double>();
}

RunManifest cluster(const ClusterArgs& args) {
    if (args.space != "raw" && args.space != "pca")
        throw Error(Errc::InvalidArgument, "space must be raw or pca, got '" + args.space + "'");
    const RunManifest m = require(args.run, Stage::Cluster);
    return run_stage(args.run, Stage::Cluster, [&] {
        const RowMatrixXd X = load_space(args.run, m, args.space);
        KMeansOptions opts;
        opts.k = args.k;
        opts.seed = args.seed;
        opts.restarts = args.restarts;
        opts.max_iter = args.max_iter;
        opts.tol = args.tol;
        const ClusterModel model = kmeans_fit(X, opts);
        const std::string digest = save_clusters(args.run, model, args.space);
        std::map<std::string, std::string> hashes{{"clusters.json", digest}};
        if (fs::exists(args.run / "centroids.phn")) hashes["centroids.phn"] = sha256_file(args.run / "centroids.phn");
        return update_stage(args.run, Stage::Cluster, StageStatus::Done, hashes, {{"cluster_space", args.space}});
    });
}

std::vector<ElbowPoint> elbow(const ElbowArgs& args) {
    if (args.k_min < 1 || args.k_max < args.k_min || args.step < 1)
        throw Error(Errc::InvalidArgument, "need 1 <= k-min <= k-max and step >= 1");
    const RunManifest m = require(args.run, args.space == "pca" ? Stage::Cluster : Stage::Reduce);
    const RowMatrixXd X = load_space(args.run, m, args.space);
    std::vector<int> ks;
    for (int k = args.k_min; k <= args.k_max; k += args.step) ks.push_back(k);
    KMeansOptions base;
    base.seed = args.seed;
    base.restarts = args.restarts;
    auto curve = elbow_scan(X, ks, base);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : curve)
        j.push_back({{"k", p.k}, {"mean_intra_cluster_variance", p.mean_intra_cluster_variance}, {"inertia", p.inertia}});
    save_json(args.run / "elbow.json", {{"space", args.space}, {"seed", args.seed}, {"curve", j}});
    return curve;
}

RunManifest tsne(const TsneArgs& args) {
    const RunManifest m = require(args.run, Stage::Tsne);
    return run_stage(args.run, Stage::Tsne, [&] {
        const RowMatrixXd X = load_space(args.run, m, "pca");
        TsneOptions opts;
        opts.perplexity = args.perplexity;
        opts.seed = args.seed;
        opts.iters = args.iters;
        const TsneLayout layout = phenoscope::tsne(X, opts);
        const std::string digest = save_tsne(args.run, layout);
        return update_stage(args.run, Stage::Tsne, StageStatus::Done, {{"tsne.json", digest}});
    });
}

nlohmann::json metrics(const MetricsArgs& args) {
    const RunManifest m = require(args.run, Stage::Metrics);
    nlohmann::json out;
    run_stage(args.run, Stage::Metrics, [&] {
        const RowMatrixXd X = load_space(args.run, m, args.space);
        const auto records = run_records(args.run);
        const ClusterModel clusters = load_clusters(args.run);
        if (records.size() != clusters.assignments.size() || static_cast<Eigen::Index>(records.size()) != X.rows())
            throw Error(Errc::CorruptFile, "records, features and cluster assignments disagree in length");

        out["space"] = args.space;
        out["global_variance"] = variance(X);
        nlohmann::json groupings = nlohmann::json::object();
        auto add = [&](const std::string& name, const std::vector<int>& groups) {
            const auto g = group_variance_ratio(X, std::span<const int>(groups));
            groupings[name] = {{"mean_intra_group_variance", g.mean_intra_group_variance},
                               {"ratio_to_global", g.ratio},
                               {"group_count", g.group_count}};
        };
        std::vector<std::string> names = args.group_by;
        if (std::find(names.begin(), names.end(), "phenotype_cluster") == names.end())
            names.push_back("phenotype_cluster");
        for (const auto& name : names) {
            std::vector<std::string> labels;
            labels.reserve(records.size());
            for (std::size_t i = 0; i < records.size(); ++i) {
                const auto& r = records[i];
                if (name == "well") labels.push_back(r.plate_id + "/" + r.well_id);
                else if (name == "chem_cluster") labels.push_back(r.chem_cluster_id);
                else if (name == "compound") labels.push_back(r.compound_id);
                else if (name == "plate") labels.push_back(r.plate_id);
                else if (name == "phenotype_label") labels.push_back(r.phenotype_label.value_or(""));
                else if (name == "phenotype_cluster") labels.push_back(std::to_string(clusters.assignments[i]));
                else throw Error(Errc::InvalidArgument, "unknown grouping '" + name + "'");
            }
            add(name, encode_groups(labels));
        }
        out["groupings"] = groupings;

        std::set<int> kept = args.kept ? *args.kept : load_triage(args.run).kept();
        out["fold_reduction"] = nullptr;
        if (!kept.empty()) {
            try {
                out["fold_reduction"] = fold_reduction(clusters, kept, records);
            } catch (const Error& e) {
                if (e.code() != Errc::NoKeptCompounds) throw;
            }
        }
        out["kept_clusters"] = kept;

        if (fs::exists(args.run / "pca.json")) {
            const PcaModel pca = load_pca(args.run);
            try {
                const auto rep = explained_variance_report(pca, args.explained_threshold);
                out["explained_variance"] = {{"threshold", args.explained_threshold},
                                             {"components_needed", rep.components_needed},
                                             {"cumulative", rep.cumulative}};
            } catch (const Error& e) {
                if (e.code() != Errc::ThresholdUnreachable) throw;
                out["explained_variance"] = {{"threshold", args.explained_threshold},
                                             {"components_needed", nullptr}};
            }
        }

        const bool labelled = std::all_of(records.begin(), records.end(),
                                          [](const ImageRecord& r) { return r.phenotype_label.has_value(); });
        if (labelled) {
            std::vector<std::string> labels;
            for (const auto& r : records) labels.push_back(*r.phenotype_label);
            const auto truth = encode_groups(labels);
            out["ari_vs_phenotype_label"] = adjusted_rand_index(truth, clusters.assignments);
        }
        const std::string digest = save_json(args.run / "metrics.json", out);
        return update_stage(args.run, Stage::Metrics, StageStatus::Done, {{"metrics.json", digest}});
    });
    return out;
}

std::string ExportResult::csv() const {
    std::ostringstream s;
    s << "compound_id,chem_cluster_id,kept_cluster_ids\n";
    for (const auto& r : rows) {
        s << r.compound_id << ',' << r.chem_cluster_id << ',';
        for (std::size_t i = 0; i < r.kept_cluster_ids.size(); ++i) s << (i ? ";" : "") << r.kept_cluster_ids[i];
        s << '\n';
    }
    return s.str();
}

ExportResult export_kept(const std::vector<ImageRecord>& records, const std::vector<int>& assignments, int k,
                         const std::set<int>& kept) {
    if (records.size() != assignments.size())
        throw Error(Errc::DimMismatch, "records and assignments disagree in length");
    std::map<std::string, ExportRow> rows;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!kept.count(assignments[i])) continue;
        auto& row = rows[records[i].compound_id];
        row.compound_id = records[i].compound_id;
        row.chem_cluster_id = records[i].chem_cluster_id;
        if (std::find(row.kept_cluster_ids.begin(), row.kept_cluster_ids.end(), assignments[i]) ==
            row.kept_cluster_ids.end())
            row.kept_cluster_ids.push_back(assignments[i]);
    }
    ExportResult out;
    for (auto& [id, row] : rows) {
        std::sort(row.kept_cluster_ids.begin(), row.kept_cluster_ids.end());
        out.rows.push_back(std::move(row));
    }
    if (!out.rows.empty()) out.fold_reduction = fold_reduction(assignments, k, kept, records);
    return out;
}

}  // namespace phenoscope::pipeline
