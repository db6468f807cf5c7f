#pragma once

#include "phenoscope/embed.hpp"
#include "phenoscope/ingest.hpp"
#include "phenoscope/store.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace phenoscope {

struct ClusterSummary {
    int cluster_id = 0;
    int size = 0;
    int compound_count = 0;
    std::vector<int> sample_row_ids;  // nearest to centroid first
    Decision decision = Decision::Unreviewed;

    nlohmann::json to_json() const;
};

// Transport-independent reply; mount() adapts it to cpp-httplib.
struct Reply {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
    std::map<std::string, std::string> headers;

    static Reply json(const nlohmann::json& j, int status = 200);
    static Reply error(int status, const std::string& message);
};

inline constexpr int kMaxSamples = 16;
inline constexpr int kThumbnailMaxDim = 256;

// Run artifacts are read once at construction. Only triage decisions change afterwards,
// and those go through update_triage() so concurrent writers serialize on the run lock.
class TriageService {
public:
    explicit TriageService(const fs::path& run_dir);

    Reply run_summary() const;
    Reply clusters() const;
    Reply samples(int cluster_id, int limit) const;
    Reply layout() const;
    Reply set_decision(int cluster_id, const std::string& request_body);
    Reply export_csv() const;
    Reply export_json() const;
    Reply thumbnail(long row_index) const;

    const fs::path& run_dir() const { return run_; }
    bool clustered() const { return clusters_.has_value(); }

private:
    ClusterSummary summary(int cluster_id, const TriageState& triage) const;
    std::optional<Reply> require_clusters() const;

    fs::path run_;
    RunManifest manifest_;
    std::vector<ImageRecord> records_;
    fs::path image_root_;
    PreprocessConfig preprocess_;
    std::optional<ClusterModel> clusters_;
    std::optional<TsneLayout> layout_;
    nlohmann::json metrics_;
    std::vector<std::vector<int>> members_;  // per cluster, ordered by distance to centroid
    std::vector<int> compound_counts_;
};

// 8-bit RGB thumbnail: channel map applied, each channel stretched between its 1st and 99th
// percentile, longest side reduced to at most `max_dim` with area interpolation. PNG bytes.
std::string render_thumbnail(const DecodedImage& image, const PreprocessConfig& cfg, int max_dim = kThumbnailMaxDim);

// Registers every endpoint (and optional static UI assets) on `server`.
void mount(httplib::Server& server, TriageService& service, const std::optional<fs::path>& ui_dir = std::nullopt);

// Blocks serving until the process is stopped.
void serve(const fs::path& run_dir, const std::string& bind, int port, const std::optional<fs::path>& ui_dir);

}  // namespace phenoscope
