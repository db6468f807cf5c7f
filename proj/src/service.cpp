#include "phenoscope/service.hpp"

#include "phenoscope/error.hpp"
#include "phenoscope/pipeline.hpp"

#include <httplib.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <iostream>
#include <numeric>
#include <set>

namespace phenoscope {

nlohmann::json ClusterSummary::to_json() const {
    return {{"cluster_id", cluster_id},
            {"size", size},
            {"compound_count", compound_count},
            {"sample_row_ids", sample_row_ids},
            {"decision", decision_name(decision)}};
}

Reply Reply::json(const nlohmann::json& j, int status) {
    Reply r;
    r.status = status;
    r.body = j.dump();
    return r;
}

Reply Reply::error(int status, const std::string& message) {
    return json({{"error", message}}, status);
}

TriageService::TriageService(const fs::path& run_dir) : run_(run_dir), manifest_(load_run(run_dir)) {
    if (!manifest_.done(Stage::Cluster)) return;
    records_ = pipeline::run_records(run_);
    image_root_ = manifest_.properties.count("image_root") ? fs::path(manifest_.properties.at("image_root")) : run_;
    preprocess_ = PreprocessConfig::load(run_ / "preprocess.json");
    clusters_ = load_clusters(run_);
    if (clusters_->assignments.size() != records_.size())
        throw Error(Errc::CorruptFile, "clusters.json assigns " + std::to_string(clusters_->assignments.size()) +
                                           " rows but the run has " + std::to_string(records_.size()));
    if (manifest_.done(Stage::Tsne)) layout_ = load_tsne(run_);
    if (manifest_.done(Stage::Metrics)) metrics_ = load_json(run_ / "metrics.json");

    const std::string space = load_json(run_ / "clusters.json").value("space", "raw");
    const RowMatrixXd X = pipeline::load_space(run_, manifest_, space);
    const int k = clusters_->k;
    std::vector<double> dist(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i)
        dist[i] = (X.row(static_cast<Eigen::Index>(i)) - clusters_->centroids.row(clusters_->assignments[i]))
                      .squaredNorm();
    members_.assign(k, {});
    std::vector<std::set<std::string>> compounds(k);
    for (std::size_t i = 0; i < records_.size(); ++i) {
        members_[clusters_->assignments[i]].push_back(static_cast<int>(i));
        compounds[clusters_->assignments[i]].insert(records_[i].compound_id);
    }
    for (auto& m : members_)
        std::stable_sort(m.begin(), m.end(), [&](int a, int b) { return dist[a] < dist[b]; });
    compound_counts_.resize(k);
    for (int c = 0; c < k; ++c) compound_counts_[c] = static_cast<int>(compounds[c].size());
}

std::optional<Reply> TriageService::require_clusters() const {
    if (clustered()) return std::nullopt;
    return Reply::error(409, "cluster stage is not complete for this run");
}

ClusterSummary TriageService::summary(int cluster_id, const TriageState& triage) const {
    ClusterSummary s;
    s.cluster_id = cluster_id;
    const auto& m = members_[cluster_id];
    s.size = static_cast<int>(m.size());
    s.compound_count = compound_counts_[cluster_id];
    s.sample_row_ids.assign(m.begin(), m.begin() + std::min<std::size_t>(m.size(), kMaxSamples));
    s.decision = triage.decision(cluster_id);
    return s;
}

Reply TriageService::run_summary() const {
    const RunManifest m = load_run(run_);
    nlohmann::json stages = nlohmann::json::object();
    for (Stage s : kAllStages) stages[std::string(stage_name(s))] = status_name(m.status(s));
    nlohmann::json j{{"run_id", m.run_id},
                     {"created_at", m.created_at},
                     {"stage_status", stages},
                     {"n", records_.size()},
                     {"k", clusters_ ? nlohmann::json(clusters_->k) : nlohmann::json(nullptr)},
                     {"has_layout", layout_.has_value()},
                     {"metrics", metrics_.is_null() ? nlohmann::json(nullptr) : metrics_}};
    return Reply::json(j);
}

Reply TriageService::clusters() const {
    if (auto r = require_clusters()) return *r;
    const TriageState triage = load_triage(run_);
    nlohmann::json out = nlohmann::json::array();
    for (int c = 0; c < clusters_->k; ++c) out.push_back(summary(c, triage).to_json());
    return Reply::json(out);
}

Reply TriageService::samples(int cluster_id, int limit) const {
    if (auto r = require_clusters()) return *r;
    if (cluster_id < 0 || cluster_id >= clusters_->k)
        return Reply::error(404, "unknown cluster " + std::to_string(cluster_id));
    if (limit < 0) return Reply::error(400, "limit must be non-negative");
    const auto& m = members_[cluster_id];
    nlohmann::json out = nlohmann::json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(m.size(), static_cast<std::size_t>(limit)); ++i) {
        const auto& r = records_[m[i]];
        out.push_back({{"row_id", m[i]},
                       {"plate_id", r.plate_id},
                       {"well_id", r.well_id},
                       {"field_index", r.field_index},
                       {"compound_id", r.compound_id},
                       {"chem_cluster_id", r.chem_cluster_id},
                       {"thumbnail_url", "/thumbs/" + std::to_string(m[i]) + ".png"}});
    }
    return Reply::json({{"cluster_id", cluster_id}, {"samples", out}});
}

Reply TriageService::layout() const {
    if (auto r = require_clusters()) return *r;
    if (!layout_) return Reply::error(409, "tsne stage is not complete for this run");
    if (layout_->coords.rows() != static_cast<Eigen::Index>(records_.size()))
        return Reply::error(500, "layout and run rows disagree");
    const TriageState triage = load_triage(run_);
    nlohmann::json pts = nlohmann::json::array();
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const int c = clusters_->assignments[i];
        pts.push_back({{"row_id", i},
                       {"x", layout_->coords(static_cast<Eigen::Index>(i), 0)},
                       {"y", layout_->coords(static_cast<Eigen::Index>(i), 1)},
                       {"cluster_id", c},
                       {"decision", decision_name(triage.decision(c))}});
    }
    return Reply::json({{"perplexity", layout_->perplexity}, {"points", pts}});
}

Reply TriageService::set_decision(int cluster_id, const std::string& request_body) {
    if (auto r = require_clusters()) return *r;
    if (cluster_id < 0 || cluster_id >= clusters_->k)
        return Reply::error(404, "unknown cluster " + std::to_string(cluster_id));
    const auto body = nlohmann::json::parse(request_body, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("decision") || !body["decision"].is_string())
        return Reply::error(400, "body must be {\"decision\": \"keep\"|\"discard\"|\"unreviewed\"}");
    const auto decision = parse_decision(body["decision"].get<std::string>());
    if (!decision) return Reply::error(400, "invalid decision '" + body["decision"].get<std::string>() + "'");
    const TriageState state = update_triage(run_, [&](TriageState& t) {
        t.decisions[cluster_id] = *decision;
        if (body.contains("note") && body["note"].is_string()) t.notes[cluster_id] = body["note"].get<std::string>();
    });
    return Reply::json(summary(cluster_id, state).to_json());
}

Reply TriageService::export_csv() const {
    if (auto r = require_clusters()) return *r;
    const auto result = pipeline::export_kept(records_, clusters_->assignments, clusters_->k, load_triage(run_).kept());
    Reply r;
    r.content_type = "text/csv";
    r.body = result.csv();
    r.headers["X-Fold-Reduction"] = result.fold_reduction ? nlohmann::json(*result.fold_reduction).dump() : "null";
    return r;
}

Reply TriageService::export_json() const {
    if (auto r = require_clusters()) return *r;
    const auto result = pipeline::export_kept(records_, clusters_->assignments, clusters_->k, load_triage(run_).kept());
    nlohmann::json compounds = nlohmann::json::array();
    for (const auto& row : result.rows)
        compounds.push_back({{"compound_id", row.compound_id},
                             {"chem_cluster_id", row.chem_cluster_id},
                             {"kept_cluster_ids", row.kept_cluster_ids}});
    return Reply::json({{"fold_reduction", result.fold_reduction ? nlohmann::json(*result.fold_reduction) : nullptr},
                        {"compounds", compounds},
                        {"csv", result.csv()}});
}

std::string render_thumbnail(const DecodedImage& image, const PreprocessConfig& cfg, int max_dim) {
    const Planes& p = image.planes;
    const Eigen::Index n = static_cast<Eigen::Index>(p.height) * p.width;
    cv::Mat rgb(p.height, p.width, CV_8UC3);
    for (int c = 0; c < 3; ++c) {
        const int src = cfg.channel_map[c].value_or(p.channels() >= 3 ? c : 0);
        if (src < 0 || src >= p.channels())
            throw Error(Errc::ChannelMapError, "channel map refers to source channel " + std::to_string(src) +
                                                   " of a " + std::to_string(p.channels()) + "-channel image");
        std::vector<float> sorted(p.data.row(src).data(), p.data.row(src).data() + n);
        std::sort(sorted.begin(), sorted.end());
        const auto pct = [&](double q) { return sorted[static_cast<std::size_t>(q * static_cast<double>(n - 1))]; };
        const float lo = pct(0.01);
        const float hi = pct(0.99);
        const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
        for (int y = 0; y < p.height; ++y)
            for (int x = 0; x < p.width; ++x) {
                const float v = std::clamp((p.at(src, y, x) - lo) * scale, 0.0f, 255.0f);
                rgb.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(v));  // BGR
            }
    }
    const int longest = std::max(p.height, p.width);
    if (longest > max_dim) {
        const double f = static_cast<double>(max_dim) / longest;
        cv::Mat small;
        cv::resize(rgb, small,
                   cv::Size(std::max(1, static_cast<int>(std::lround(p.width * f))),
                            std::max(1, static_cast<int>(std::lround(p.height * f)))),
                   0, 0, cv::INTER_AREA);
        rgb = small;
    }
    std::vector<unsigned char> png;
    if (!cv::imencode(".png", rgb, png)) throw Error(Errc::IoError, "PNG encoding failed");
    return {png.begin(), png.end()};
}

Reply TriageService::thumbnail(long row_index) const {
    if (auto r = require_clusters()) return *r;
    if (row_index < 0 || row_index >= static_cast<long>(records_.size()))
        return Reply::error(404, "unknown row " + std::to_string(row_index));
    const fs::path cached = run_ / "thumbs" / (std::to_string(row_index) + ".png");
    Reply r;
    r.content_type = "image/png";
    if (fs::exists(cached)) {
        r.body = read_file(cached);
        return r;
    }
    const auto& rec = records_[static_cast<std::size_t>(row_index)];
    r.body = render_thumbnail(decode_image(image_root_ / rec.image_path), preprocess_);
    fs::create_directories(cached.parent_path());
    atomic_write(cached, r.body);
    return r;
}

namespace {

void send(httplib::Response& res, const Reply& r) {
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    res.set_content(r.body, r.content_type);
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            send(res, f(req));
        } catch (const Error& e) {
            send(res, Reply::error(e.code() == Errc::DecodeError ? 404 : 500, e.what()));
        } catch (const std::exception& e) {
            send(res, Reply::error(500, e.what()));
        }
    };
}

// Path ids are matched by \d+ so only overflow can fail here.
std::optional<int> to_int(const std::string& s) {
    try {
        return std::stoi(s);
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace

void mount(httplib::Server& server, TriageService& svc, const std::optional<fs::path>& ui_dir) {
    server.Get("/api/run", guarded([&](const httplib::Request&) { return svc.run_summary(); }));
    server.Get("/api/clusters", guarded([&](const httplib::Request&) { return svc.clusters(); }));
    server.Get(R"(/api/clusters/(\d+)/samples)", guarded([&](const httplib::Request& req) {
                   const auto id = to_int(req.matches[1]);
                   if (!id) return Reply::error(404, "unknown cluster");
                   int limit = kMaxSamples;
                   if (req.has_param("limit")) {
                       const auto l = to_int(req.get_param_value("limit"));
                       if (!l) return Reply::error(400, "limit must be an integer");
                       limit = *l;
                   }
                   return svc.samples(*id, limit);
               }));
    server.Get("/api/layout", guarded([&](const httplib::Request&) { return svc.layout(); }));
    server.Post(R"(/api/clusters/(-?\d+)/decision)", guarded([&](const httplib::Request& req) {
                    const auto id = to_int(req.matches[1]);
                    if (!id) return Reply::error(404, "unknown cluster");
                    return svc.set_decision(*id, req.body);
                }));
    server.Get("/api/export", guarded([&](const httplib::Request& req) {
                   return req.get_param_value("format") == "json" ? svc.export_json() : svc.export_csv();
               }));
    server.Get(R"(/thumbs/(\d+)\.png)", guarded([&](const httplib::Request& req) {
                   long row = -1;
                   try {
                       row = std::stol(req.matches[1]);
                   } catch (const std::exception&) {
                   }
                   return svc.thumbnail(row);
               }));
    if (ui_dir && !server.set_mount_point("/", ui_dir->string()))
        throw Error(Errc::IoError, "cannot serve UI assets from " + ui_dir->string());
}

void serve(const fs::path& run_dir, const std::string& bind, int port, const std::optional<fs::path>& ui_dir) {
    TriageService svc(run_dir);
    httplib::Server server;
    mount(server, svc, ui_dir);
    if (!server.bind_to_port(bind, port))
        throw Error(Errc::IoError, "cannot bind " + bind + ":" + std::to_string(port));
    std::cerr << "serving " << run_dir.string() << " on http://" << bind << ':' << port << '\n';
    server.listen_after_bind();
}

}  // namespace phenoscope
