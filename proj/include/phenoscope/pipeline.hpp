#pragma once

#include "phenoscope/embed.hpp"
#include "phenoscope/featnet.hpp"
#include "phenoscope/ingest.hpp"
#include "phenoscope/metrics.hpp"
#include "phenoscope/store.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

// Stage drivers over a run directory. Each reads its inputs from the run, checks the
// stage order, writes its artifacts atomically and records their checksums in run.json.
namespace phenoscope::pipeline {

struct IngestArgs {
    fs::path manifest;
    std::optional<fs::path> preprocess;  // defaults to ImageNet constants
    fs::path run;
    bool check_images = true;
};
RunManifest ingest(const IngestArgs& args);

struct ExtractArgs {
    fs::path run;
    fs::path model;
    std::string taps = "4:128,7:256,9:512";
    int batch = 8;
    int threads = 1;
    bool skip_failures = false;
    std::optional<std::string> model_sha256;
};
RunManifest extract(const ExtractArgs& args);

struct ReduceArgs {
    fs::path run;
    int pca_dims = 10;
    bool standardize = false;
};
RunManifest reduce(const ReduceArgs& args);

struct ClusterArgs {
    fs::path run;
    int k = 70;
    std::string space = "raw";  // raw | pca
    std::uint64_t seed = 0;
    int restarts = 10;
    int max_iter = 300;
    double tol = 1e-4;
};
RunManifest cluster(const ClusterArgs& args);

struct ElbowArgs {
    fs::path run;
    int k_min = 1;
    int k_max = 100;
    int step = 1;
    std::string space = "raw";
    std::uint64_t seed = 0;
    int restarts = 10;
};
std::vector<ElbowPoint> elbow(const ElbowArgs& args);

struct TsneArgs {
    fs::path run;
    double perplexity = 30.0;
    std::uint64_t seed = 0;
    int iters = 1000;
};
RunManifest tsne(const TsneArgs& args);

struct MetricsArgs {
    fs::path run;
    std::vector<std::string> group_by{"well", "chem_cluster"};
    std::optional<std::set<int>> kept;  // falls back to triage.json keep decisions
    std::string space = "raw";
    double explained_threshold = 0.9;
};
nlohmann::json metrics(const MetricsArgs& args);

// Records of the run in feature-row order.
std::vector<ImageRecord> run_records(const fs::path& run);

// Matrix in the requested clustering space ("raw" honours the reduce stage's standardize flag).
RowMatrixXd load_space(const fs::path& run, const RunManifest& manifest, const std::string& space);

struct ExportRow {
    std::string compound_id;
    std::string chem_cluster_id;
    std::vector<int> kept_cluster_ids;
};

struct ExportResult {
    std::vector<ExportRow> rows;  // sorted by compound_id
    std::optional<double> fold_reduction;

    std::string csv() const;
};

ExportResult export_kept(const std::vector<ImageRecord>& records, const std::vector<int>& assignments, int k,
                         const std::set<int>& kept);

}  // namespace phenoscope::pipeline
