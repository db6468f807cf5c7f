#include "phenoscope/store.hpp"

#include "phenoscope/error.hpp"
#include "phenoscope/hash.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

namespace phenoscope {

static_assert(std::endian::native == std::endian::little, ".phn IO assumes a little-endian host");

// ---------------------------------------------------------------------------
// files

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void atomic_write(const fs::path& path, std::string_view bytes) {
    static std::atomic<unsigned> counter{0};
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw Error(Errc::IoError, "cannot create " + tmp.string() + ": " + std::strerror(errno));
    std::size_t written = 0;
    while (written < bytes.size()) {
        const auto n = ::write(fd, bytes.data() + written, bytes.size() - written);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string msg = std::strerror(errno);
            ::close(fd);
            ::unlink(tmp.c_str());
            throw Error(Errc::IoError, "write " + tmp.string() + ": " + msg);
        }
        written += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
    if (::rename(tmp.c_str(), path.c_str()) != 0) {
        const std::string msg = std::strerror(errno);
        ::unlink(tmp.c_str());
        throw Error(Errc::IoError, "rename to " + path.string() + ": " + msg);
    }
}

RunLock::RunLock(const fs::path& run_dir) {
    const fs::path p = run_dir / ".lock";
    fd_ = ::open(p.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(Errc::IoError, "cannot open lock " + p.string() + ": " + std::strerror(errno));
    while (::flock(fd_, LOCK_EX) != 0) {
        if (errno != EINTR) {
            ::close(fd_);
            throw Error(Errc::IoError, "flock " + p.string() + ": " + std::strerror(errno));
        }
    }
}

RunLock::~RunLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    ::gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// ---------------------------------------------------------------------------
// .phn

std::string write_phn(const fs::path& path, const RowMatrixXf& m) {
    if (m.rows() > 0xFFFFFFFFll || m.cols() > 0xFFFFFFFFll)
        throw Error(Errc::InvalidArgument, "matrix too large for .phn");
    std::string bytes;
    bytes.reserve(13 + static_cast<std::size_t>(m.size()) * 4);
    bytes.append(kPhnMagic.data(), kPhnMagic.size());
    bytes.push_back(static_cast<char>(kPhnVersion));
    const auto rows = static_cast<std::uint32_t>(m.rows());
    const auto cols = static_cast<std::uint32_t>(m.cols());
    bytes.append(reinterpret_cast<const char*>(&rows), 4);
    bytes.append(reinterpret_cast<const char*>(&cols), 4);
    bytes.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * 4);
    atomic_write(path, bytes);
    return sha256_hex(bytes);
}

RowMatrixXf read_phn(const fs::path& path, const std::optional<std::string>& expected_sha256) {
    const std::string bytes = read_file(path);
    if (expected_sha256 && sha256_hex(bytes) != *expected_sha256)
        throw Error(Errc::CorruptFile, path.string() + ": checksum does not match the recorded value");
    if (bytes.size() < 13) throw Error(Errc::CorruptFile, path.string() + ": truncated header");
    if (std::memcmp(bytes.data(), kPhnMagic.data(), 4) != 0)
        throw Error(Errc::CorruptFile, path.string() + ": bad magic");
    if (static_cast<std::uint8_t>(bytes[4]) != kPhnVersion)
        throw Error(Errc::CorruptFile, path.string() + ": unsupported version " +
                                           std::to_string(static_cast<std::uint8_t>(bytes[4])));
    std::uint32_t rows = 0, cols = 0;
    std::memcpy(&rows, bytes.data() + 5, 4);
    std::memcpy(&cols, bytes.data() + 9, 4);
    const std::size_t expected = 13 + static_cast<std::size_t>(rows) * cols * 4;
    if (bytes.size() != expected)
        throw Error(Errc::CorruptFile, path.string() + ": size " + std::to_string(bytes.size()) + " != expected " +
                                           std::to_string(expected));
    RowMatrixXf m(rows, cols);
    if (m.size() > 0) std::memcpy(m.data(), bytes.data() + 13, static_cast<std::size_t>(m.size()) * 4);
    return m;
}

fs::path rows_sidecar_path(const fs::path& phn_path) {
    const auto stem = phn_path.stem().string();
    return phn_path.parent_path() / (stem == "features" ? std::string("rows.json") : stem + ".rows.json");
}

nlohmann::json row_ids_to_json(const std::vector<RowKey>& ids) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& k : ids)
        arr.push_back({{"plate_id", k.plate_id}, {"well_id", k.well_id}, {"field_index", k.field_index}});
    return arr;
}

std::vector<RowKey> row_ids_from_json(const nlohmann::json& j) {
    std::vector<RowKey> ids;
    try {
        for (const auto& e : j)
            ids.push_back({e.at("plate_id").get<std::string>(), e.at("well_id").get<std::string>(),
                           e.at("field_index").get<int>()});
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, std::string("row ids: ") + e.what());
    }
    return ids;
}

std::string write_matrix(const fs::path& path, const FeatureMatrix& m) {
    validate(m);
    const std::string digest = write_phn(path, m.values);
    atomic_write(rows_sidecar_path(path), row_ids_to_json(m.row_ids).dump() + "\n");
    return digest;
}

FeatureMatrix read_matrix(const fs::path& path, const std::optional<std::string>& expected_sha256) {
    FeatureMatrix m;
    m.values = read_phn(path, expected_sha256);
    const fs::path side = rows_sidecar_path(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(side));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, side.string() + ": " + e.what());
    } catch (const Error& e) {
        throw Error(Errc::CorruptFile, side.string() + ": " + e.detail());
    }
    m.row_ids = row_ids_from_json(j);
    if (static_cast<Eigen::Index>(m.row_ids.size()) != m.rows())
        throw Error(Errc::CorruptFile, side.string() + " lists " + std::to_string(m.row_ids.size()) +
                                           " rows, matrix has " + std::to_string(m.rows()));
    return m;
}

// ---------------------------------------------------------------------------
// run.json

std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::Ingest: return "ingest";
        case Stage::Extract: return "extract";
        case Stage::Reduce: return "reduce";
        case Stage::Cluster: return "cluster";
        case Stage::Tsne: return "tsne";
        case Stage::Metrics: return "metrics";
    }
    return "?";
}

Stage parse_stage(std::string_view name) {
    for (auto s : kAllStages)
        if (stage_name(s) == name) return s;
    throw Error(Errc::InvalidArgument, "unknown stage '" + std::string(name) + "'");
}

std::string_view status_name(StageStatus s) {
    switch (s) {
        case StageStatus::Pending: return "pending";
        case StageStatus::Done: return "done";
        case StageStatus::Failed: return "failed";
    }
    return "?";
}

std::vector<Stage> upstream_of(Stage s) {
    switch (s) {
        case Stage::Ingest: return {};
        case Stage::Extract: return {Stage::Ingest};
        case Stage::Reduce: return {Stage::Ingest, Stage::Extract};
        case Stage::Cluster:
        case Stage::Tsne: return {Stage::Ingest, Stage::Extract, Stage::Reduce};
        case Stage::Metrics: return {Stage::Ingest, Stage::Extract, Stage::Reduce, Stage::Cluster};
    }
    return {};
}

StageStatus RunManifest::status(Stage s) const {
    auto it = stage_status.find(s);
    return it == stage_status.end() ? StageStatus::Pending : it->second;
}

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j;
    j["run_id"] = run_id;
    j["created_at"] = created_at;
    nlohmann::json st = nlohmann::json::object();
    for (auto s : kAllStages) st[std::string(stage_name(s))] = std::string(status_name(status(s)));
    j["stage_status"] = st;
    j["config_hashes"] = config_hashes;
    j["properties"] = properties;
    return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest r;
    try {
        r.run_id = j.at("run_id").get<std::string>();
        r.created_at = j.at("created_at").get<std::string>();
        for (const auto& [name, status] : j.at("stage_status").items()) {
            const auto v = status.get<std::string>();
            StageStatus st = StageStatus::Pending;
            if (v == "done") st = StageStatus::Done;
            else if (v == "failed") st = StageStatus::Failed;
            else if (v != "pending") throw Error(Errc::CorruptFile, "run.json: bad status '" + v + "'");
            r.stage_status[parse_stage(name)] = st;
        }
        if (j.contains("config_hashes")) r.config_hashes = j.at("config_hashes").get<std::map<std::string, std::string>>();
        if (j.contains("properties")) r.properties = j.at("properties").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, std::string("run.json: ") + e.what());
    } catch (const Error& e) {
        throw Error(Errc::CorruptFile, "run.json: " + e.detail());
    }
    return r;
}

namespace {

RunManifest read_run_unlocked(const fs::path& dir) {
    const fs::path p = dir / "run.json";
    if (!fs::exists(p)) return {};
    try {
        return RunManifest::from_json(nlohmann::json::parse(read_file(p)));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, p.string() + ": " + e.what());
    }
}

RunManifest fresh_run() {
    RunManifest r;
    std::random_device rd;
    std::ostringstream id;
    id << "run-" << std::hex << rd() << rd();
    r.run_id = id.str();
    r.created_at = utc_timestamp();
    for (auto s : kAllStages) r.stage_status[s] = StageStatus::Pending;
    return r;
}

void write_run_unlocked(const fs::path& dir, const RunManifest& r) {
    atomic_write(dir / "run.json", r.to_json().dump(2) + "\n");
}

}  // namespace

RunManifest load_run(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(Errc::IoError, "cannot create run directory " + dir.string() + ": " + ec.message());
    if (fs::exists(dir / "run.json")) return read_run_unlocked(dir);
    RunLock lock(dir);
    if (fs::exists(dir / "run.json")) return read_run_unlocked(dir);
    RunManifest r = fresh_run();
    write_run_unlocked(dir, r);
    return r;
}

void require_stages_done(const RunManifest& run, Stage stage) {
    for (auto up : upstream_of(stage))
        if (!run.done(up))
            throw Error(Errc::StageOrderViolation, "stage '" + std::string(stage_name(stage)) + "' requires '" +
                                                       std::string(stage_name(up)) + "' to be done (it is " +
                                                       std::string(status_name(run.status(up))) + ")");
}

RunManifest update_stage(const fs::path& dir, Stage stage, StageStatus status,
                         const std::map<std::string, std::string>& hashes,
                         const std::map<std::string, std::string>& properties) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    RunLock lock(dir);
    RunManifest r = fs::exists(dir / "run.json") ? read_run_unlocked(dir) : fresh_run();
    if (status == StageStatus::Done) require_stages_done(r, stage);
    // A rerun that reproduces identical artifacts keeps downstream results valid.
    bool changed = status != StageStatus::Done;
    for (const auto& [k, v] : hashes) {
        auto it = r.config_hashes.find(k);
        changed = changed || it == r.config_hashes.end() || it->second != v;
    }
    for (const auto& [k, v] : properties) {
        auto it = r.properties.find(k);
        changed = changed || it == r.properties.end() || it->second != v;
    }
    r.stage_status[stage] = status;
    if (changed) {
        for (auto s : kAllStages) {
            const auto up = upstream_of(s);
            if (std::find(up.begin(), up.end(), stage) != up.end()) r.stage_status[s] = StageStatus::Pending;
        }
    }
    for (const auto& [k, v] : hashes) r.config_hashes[k] = v;
    for (const auto& [k, v] : properties) r.properties[k] = v;
    write_run_unlocked(dir, r);
    return r;
}

void verify_artifact(const fs::path& dir, const RunManifest& run, const std::string& artifact) {
    auto it = run.config_hashes.find(artifact);
    if (it == run.config_hashes.end()) throw Error(Errc::CorruptFile, artifact + " has no recorded checksum");
    const fs::path p = dir / artifact;
    if (!fs::exists(p)) throw Error(Errc::CorruptFile, p.string() + " is missing");
    if (sha256_file(p) != it->second)
        throw Error(Errc::CorruptFile, p.string() + ": checksum does not match run.json");
}

// ---------------------------------------------------------------------------
// stage artifacts

std::string save_json(const fs::path& path, const nlohmann::json& j) {
    const std::string text = j.dump(1) + "\n";
    atomic_write(path, text);
    return sha256_hex(text);
}

nlohmann::json load_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, path.string() + ": " + e.what());
    }
}

nlohmann::json matrix_to_json(const fs::path& dir, const std::string& name, const RowMatrixXd& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(float);
    if (bytes >= kInlineMatrixLimit) {
        const std::string file = name + ".phn";
        const std::string digest = write_phn(dir / file, m.cast<float>());
        return {{"phn", file}, {"rows", m.rows()}, {"cols", m.cols()}, {"sha256", digest}};
    }
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> r(m.row(i).data(), m.row(i).data() + m.cols());
        rows.push_back(std::move(r));
    }
    return rows;
}

RowMatrixXd matrix_from_json(const fs::path& dir, const nlohmann::json& j) {
    if (j.is_object()) {
        const auto file = j.at("phn").get<std::string>();
        std::optional<std::string> digest;
        if (j.contains("sha256")) digest = j.at("sha256").get<std::string>();
        return read_phn(dir / file, digest).cast<double>();
    }
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    RowMatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& r = j.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(r.size()) != cols) throw Error(Errc::CorruptFile, "ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = r.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

namespace {

template <typename Vec>
std::vector<double> to_std(const Vec& v) {
    return {v.data(), v.data() + v.size()};
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename F>
auto corrupt_guard(const fs::path& p, F&& f) {
    try {
        return f();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, p.string() + ": " + e.what());
    }
}

}  // namespace

std::string save_pca(const fs::path& dir, const PcaModel& model) {
    nlohmann::json j;
    j["mean"] = to_std(model.mean);
    j["components"] = matrix_to_json(dir, "pca_components", model.components);
    j["explained_variance_ratio"] = to_std(model.explained_variance_ratio);
    j["explained_variance"] = to_std(model.explained_variance);
    return save_json(dir / "pca.json", j);
}

PcaModel load_pca(const fs::path& dir) {
    const auto p = dir / "pca.json";
    const auto j = load_json(p);
    return corrupt_guard(p, [&] {
        PcaModel m;
        m.mean = to_eigen(j.at("mean").get<std::vector<double>>());
        m.components = matrix_from_json(dir, j.at("components"));
        m.explained_variance_ratio = to_eigen(j.at("explained_variance_ratio").get<std::vector<double>>());
        m.explained_variance = to_eigen(j.value("explained_variance", std::vector<double>{}));
        return m;
    });
}

std::string save_clusters(const fs::path& dir, const ClusterModel& model, const std::string& space) {
    nlohmann::json j;
    j["k"] = model.k;
    j["centroids"] = matrix_to_json(dir, "centroids", model.centroids);
    j["assignments"] = model.assignments;
    j["inertia"] = model.inertia;
    j["seed"] = model.seed;
    j["iterations"] = model.iterations;
    j["space"] = space;
    return save_json(dir / "clusters.json", j);
}

ClusterModel load_clusters(const fs::path& dir) {
    const auto p = dir / "clusters.json";
    const auto j = load_json(p);
    return corrupt_guard(p, [&] {
        ClusterModel m;
        m.k = j.at("k").get<int>();
        m.centroids = matrix_from_json(dir, j.at("centroids"));
        m.assignments = j.at("assignments").get<std::vector<int>>();
        m.inertia = j.at("inertia").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.iterations = j.value("iterations", 0);
        for (int a : m.assignments)
            if (a < 0 || a >= m.k) throw Error(Errc::CorruptFile, p.string() + ": assignment outside [0, k)");
        return m;
    });
}

std::string save_tsne(const fs::path& dir, const TsneLayout& layout) {
    nlohmann::json j;
    j["coords"] = matrix_to_json(dir, "tsne_coords", layout.coords);
    j["perplexity"] = layout.perplexity;
    j["seed"] = layout.seed;
    j["kl_final"] = layout.kl_final;
    return save_json(dir / "tsne.json", j);
}

TsneLayout load_tsne(const fs::path& dir) {
    const auto p = dir / "tsne.json";
    const auto j = load_json(p);
    return corrupt_guard(p, [&] {
        TsneLayout t;
        t.coords = matrix_from_json(dir, j.at("coords"));
        t.perplexity = j.at("perplexity").get<double>();
        t.seed = j.at("seed").get<std::uint64_t>();
        t.kl_final = j.at("kl_final").get<double>();
        return t;
    });
}

// ---------------------------------------------------------------------------
// triage.json

std::string_view decision_name(Decision d) {
    switch (d) {
        case Decision::Unreviewed: return "unreviewed";
        case Decision::Keep: return "keep";
        case Decision::Discard: return "discard";
    }
    return "?";
}

std::optional<Decision> parse_decision(std::string_view s) {
    if (s == "keep") return Decision::Keep;
    if (s == "discard") return Decision::Discard;
    if (s == "unreviewed") return Decision::Unreviewed;
    return std::nullopt;
}

Decision TriageState::decision(int cluster) const {
    auto it = decisions.find(cluster);
    return it == decisions.end() ? Decision::Unreviewed : it->second;
}

std::set<int> TriageState::kept() const {
    std::set<int> out;
    for (const auto& [c, d] : decisions)
        if (d == Decision::Keep) out.insert(c);
    return out;
}

nlohmann::json TriageState::to_json() const {
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [c, v] : decisions)
        if (v != Decision::Unreviewed) d[std::to_string(c)] = std::string(decision_name(v));
    nlohmann::json n = nlohmann::json::object();
    for (const auto& [c, v] : notes) n[std::to_string(c)] = v;
    return {{"decisions", d}, {"notes", n}, {"updated_at", updated_at}};
}

TriageState TriageState::from_json(const nlohmann::json& j) {
    TriageState t;
    try {
        for (const auto& [k, v] : j.at("decisions").items()) {
            const auto d = parse_decision(v.get<std::string>());
            if (!d) throw Error(Errc::CorruptFile, "triage.json: bad decision '" + v.get<std::string>() + "'");
            t.decisions[std::stoi(k)] = *d;
        }
        if (j.contains("notes"))
            for (const auto& [k, v] : j.at("notes").items()) t.notes[std::stoi(k)] = v.get<std::string>();
        t.updated_at = j.value("updated_at", "");
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::CorruptFile, std::string("triage.json: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw Error(Errc::CorruptFile, "triage.json: cluster ids must be integers");
    }
    return t;
}

TriageState load_triage(const fs::path& dir) {
    const auto p = dir / "triage.json";
    if (!fs::exists(p)) return {};
    return TriageState::from_json(load_json(p));
}

TriageState update_triage(const fs::path& dir, const std::function<void(TriageState&)>& edit) {
    RunLock lock(dir);
    TriageState t = load_triage(dir);
    edit(t);
    t.updated_at = utc_timestamp();
    save_json(dir / "triage.json", t.to_json());
    return t;
}

}  // namespace phenoscope
