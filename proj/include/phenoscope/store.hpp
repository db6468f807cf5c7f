#pragma once

#include "phenoscope/embed.hpp"
#include "phenoscope/ingest.hpp"
#include "phenoscope/types.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace phenoscope {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// .phn matrices: "PHEN", version 0x01, u32 rows, u32 dim (little-endian), then
// rows*dim little-endian float32 row-major.

inline constexpr std::array<char, 4> kPhnMagic = {'P', 'H', 'E', 'N'};
inline constexpr std::uint8_t kPhnVersion = 0x01;

// Raw matrix without row identity. Returns the file's SHA-256.
std::string write_phn(const fs::path& path, const RowMatrixXf& m);
RowMatrixXf read_phn(const fs::path& path, const std::optional<std::string>& expected_sha256 = std::nullopt);

// Sidecar listing row ids: "rows.json" for features.phn, "<stem>.rows.json" otherwise.
fs::path rows_sidecar_path(const fs::path& phn_path);

std::string write_matrix(const fs::path& path, const FeatureMatrix& m);
FeatureMatrix read_matrix(const fs::path& path, const std::optional<std::string>& expected_sha256 = std::nullopt);

nlohmann::json row_ids_to_json(const std::vector<RowKey>& ids);
std::vector<RowKey> row_ids_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Atomic file writes and the per-run advisory lock.

// Writes to a unique temporary in the same directory, fsyncs, then renames over `path`.
void atomic_write(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

// Exclusive flock() on <dir>/.lock for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const fs::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    int fd_ = -1;
};

std::string utc_timestamp();

// ---------------------------------------------------------------------------
// run.json

enum class Stage { Ingest, Extract, Reduce, Cluster, Tsne, Metrics };
enum class StageStatus { Pending, Done, Failed };

inline constexpr std::array<Stage, 6> kAllStages = {Stage::Ingest, Stage::Extract, Stage::Reduce,
                                                    Stage::Cluster, Stage::Tsne, Stage::Metrics};

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);
std::string_view status_name(StageStatus s);
// Direct and transitive upstream stages, nearest last.
std::vector<Stage> upstream_of(Stage s);

struct RunManifest {
    std::string run_id;
    std::string created_at;
    std::map<Stage, StageStatus> stage_status;
    std::map<std::string, std::string> config_hashes;  // artifact file name -> SHA-256
    std::map<std::string, std::string> properties;     // e.g. image_root, model path

    StageStatus status(Stage s) const;
    bool done(Stage s) const { return status(s) == StageStatus::Done; }

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

// Reads <dir>/run.json, initialising it (all stages pending) if the directory has none.
RunManifest load_run(const fs::path& dir);

// Serialised through RunLock. Marking a stage done requires every upstream stage done;
// marking it pending/failed, or done with new checksums or properties, resets downstream stages to pending.
RunManifest update_stage(const fs::path& dir, Stage stage, StageStatus status,
                         const std::map<std::string, std::string>& hashes = {},
                         const std::map<std::string, std::string>& properties = {});

// Throws StageOrderViolation naming the first upstream stage that is not done.
void require_stages_done(const RunManifest& run, Stage stage);

// Recomputes an artifact's digest and compares with run.json; mismatch is CorruptFile.
void verify_artifact(const fs::path& dir, const RunManifest& run, const std::string& artifact);

// ---------------------------------------------------------------------------
// Stage artifacts (JSON; matrices >= 1 MiB go to a .phn file referenced from the JSON).

inline constexpr std::size_t kInlineMatrixLimit = std::size_t{1} << 20;

nlohmann::json matrix_to_json(const fs::path& dir, const std::string& name, const RowMatrixXd& m);
RowMatrixXd matrix_from_json(const fs::path& dir, const nlohmann::json& j);

// Each save returns the SHA-256 of the JSON file written.
std::string save_pca(const fs::path& dir, const PcaModel& model);
PcaModel load_pca(const fs::path& dir);

std::string save_clusters(const fs::path& dir, const ClusterModel& model, const std::string& space);
ClusterModel load_clusters(const fs::path& dir);

std::string save_tsne(const fs::path& dir, const TsneLayout& layout);
TsneLayout load_tsne(const fs::path& dir);

std::string save_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json load_json(const fs::path& path);

// ---------------------------------------------------------------------------
// triage.json

enum class Decision { Unreviewed, Keep, Discard };

std::string_view decision_name(Decision d);
std::optional<Decision> parse_decision(std::string_view s);

struct TriageState {
    std::map<int, Decision> decisions;
    std::map<int, std::string> notes;
    std::string updated_at;

    Decision decision(int cluster) const;
    std::set<int> kept() const;

    nlohmann::json to_json() const;
    static TriageState from_json(const nlohmann::json& j);
};

TriageState load_triage(const fs::path& dir);
// Read-modify-write under RunLock; returns the state written.
TriageState update_triage(const fs::path& dir, const std::function<void(TriageState&)>& edit);

}  // namespace phenoscope
