#include "phenoscope/ingest.hpp"

#include "phenoscope/error.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace phenoscope {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + '"';
}

int parse_field_index(const std::string& s, std::size_t line_no) {
    int v = -1;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || v < 0)
        throw Error(Errc::InvalidArgument,
                    "line " + std::to_string(line_no) + ": field_index '" + s + "' is not an integer >= 0");
    return v;
}

}  // namespace

std::vector<ImageRecord> parse_manifest_text(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw Error(Errc::EmptyManifest, "manifest has no header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (!line.empty() && line.back() == '\r') line.pop_back();

    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* name : kManifestColumns)
        if (!col.count(name)) throw Error(Errc::MissingColumn, name);
    const auto label_col = col.find("phenotype_label");

    std::vector<ImageRecord> records;
    std::set<RowKey> keys;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size())
            throw Error(Errc::InvalidArgument, "line " + std::to_string(line_no) + ": expected " +
                                                   std::to_string(header.size()) + " fields, got " +
                                                   std::to_string(f.size()));
        ImageRecord r;
        r.image_path = f[col["image_path"]];
        r.plate_id = f[col["plate_id"]];
        r.well_id = f[col["well_id"]];
        r.field_index = parse_field_index(f[col["field_index"]], line_no);
        r.compound_id = f[col["compound_id"]];
        r.chem_cluster_id = f[col["chem_cluster_id"]];
        if (label_col != col.end() && !f[label_col->second].empty()) r.phenotype_label = f[label_col->second];
        if (!keys.insert(r.key()).second)
            throw Error(Errc::DuplicateKey, "(" + r.plate_id + ", " + r.well_id + ", " +
                                                std::to_string(r.field_index) + ") repeated at line " +
                                                std::to_string(line_no));
        records.push_back(std::move(r));
    }
    if (records.empty()) throw Error(Errc::EmptyManifest, "manifest has zero data rows");
    return records;
}

std::vector<ImageRecord> parse_manifest(const std::filesystem::path& manifest_file) {
    std::ifstream in(manifest_file, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open manifest " + manifest_file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest_text(ss.str());
}

void write_manifest(const std::filesystem::path& manifest_file, const std::vector<ImageRecord>& records) {
    const bool labels = std::any_of(records.begin(), records.end(),
                                    [](const ImageRecord& r) { return r.phenotype_label.has_value(); });
    std::ofstream out(manifest_file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoError, "cannot write manifest " + manifest_file.string());
    out << "image_path,plate_id,well_id,field_index,compound_id,chem_cluster_id";
    if (labels) out << ",phenotype_label";
    out << '\n';
    for (const auto& r : records) {
        out << csv_field(r.image_path) << ',' << csv_field(r.plate_id) << ',' << csv_field(r.well_id) << ','
            << r.field_index << ',' << csv_field(r.compound_id) << ',' << csv_field(r.chem_cluster_id);
        if (labels) out << ',' << csv_field(r.phenotype_label.value_or(""));
        out << '\n';
    }
    if (!out) throw Error(Errc::IoError, "short write on " + manifest_file.string());
}

PreprocessConfig PreprocessConfig::from_json_text(const std::string& text) {
    PreprocessConfig cfg;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidArgument, std::string("preprocess config: ") + e.what());
    }
    try {
        if (j.contains("channel_map")) {
            const auto& cm = j.at("channel_map");
            if (cm.is_string()) {
                if (cm.get<std::string>() != "gray")
                    throw Error(Errc::InvalidArgument, "channel_map string must be \"gray\"");
                cfg.channel_map = {0, 0, 0};
            } else {
                static constexpr const char* names[3] = {"R", "G", "B"};
                for (auto it = cm.begin(); it != cm.end(); ++it) {
                    const auto pos = std::find(std::begin(names), std::end(names), it.key());
                    if (pos == std::end(names))
                        throw Error(Errc::InvalidArgument, "channel_map key '" + it.key() + "' is not R, G or B");
                    const int src = it.value().get<int>();
                    if (src < 0) throw Error(Errc::InvalidArgument, "channel_map source index must be >= 0");
                    cfg.channel_map[pos - std::begin(names)] = src;
                }
            }
        }
        if (j.contains("means")) {
            const auto v = j.at("means").get<std::vector<float>>();
            if (v.size() != 3) throw Error(Errc::InvalidArgument, "means must have 3 entries");
            std::copy(v.begin(), v.end(), cfg.means.begin());
        }
        if (j.contains("stds")) {
            const auto v = j.at("stds").get<std::vector<float>>();
            if (v.size() != 3) throw Error(Errc::InvalidArgument, "stds must have 3 entries");
            if (std::any_of(v.begin(), v.end(), [](float s) { return !(s > 0.0f); }))
                throw Error(Errc::InvalidArgument, "stds must be positive");
            std::copy(v.begin(), v.end(), cfg.stds.begin());
        }
        if (j.contains("pad")) {
            const auto p = j.at("pad").get<std::string>();
            if (p == "normalized_zero") cfg.pad = PadFill::NormalizedZero;
            else if (p == "zero") cfg.pad = PadFill::Zero;
            else throw Error(Errc::InvalidArgument, "pad must be normalized_zero or zero");
        }
        if (j.contains("pad_multiple")) {
            cfg.pad_multiple = j.at("pad_multiple").get<int>();
            if (cfg.pad_multiple < 1) throw Error(Errc::InvalidArgument, "pad_multiple must be >= 1");
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidArgument, std::string("preprocess config: ") + e.what());
    }
    return cfg;
}

PreprocessConfig PreprocessConfig::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(Errc::IoError, "cannot open preprocess config " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string PreprocessConfig::to_json_text() const {
    nlohmann::json j;
    nlohmann::json cm = nlohmann::json::object();
    static constexpr const char* names[3] = {"R", "G", "B"};
    for (int c = 0; c < 3; ++c)
        if (channel_map[c]) cm[names[c]] = *channel_map[c];
    j["channel_map"] = cm;
    j["means"] = means;
    j["stds"] = stds;
    j["pad"] = pad == PadFill::Zero ? "zero" : "normalized_zero";
    j["pad_multiple"] = pad_multiple;
    return j.dump(2);
}

DecodedImage decode_image(const std::filesystem::path& file) {
    const cv::Mat m = cv::imread(file.string(), cv::IMREAD_UNCHANGED | cv::IMREAD_ANYDEPTH);
    if (m.empty()) throw Error(Errc::DecodeError, "cannot decode image " + file.string());

    double scale = 0.0;
    int bits = 0;
    switch (m.depth()) {
        case CV_8U: scale = 255.0; bits = 8; break;
        case CV_16U: scale = 65535.0; bits = 16; break;
        default:
            throw Error(Errc::DecodeError, file.string() + ": only 8-bit and 16-bit images are supported");
    }
    const int ch = m.channels();
    if (ch < 1 || ch > 4) throw Error(Errc::DecodeError, file.string() + ": unsupported channel count");

    // OpenCV stores colour as BGR(A); expose channels in file order (RGB(A)).
    cv::Mat ordered = m;
    if (ch == 3) cv::cvtColor(m, ordered, cv::COLOR_BGR2RGB);
    else if (ch == 4) cv::cvtColor(m, ordered, cv::COLOR_BGRA2RGBA);

    std::vector<cv::Mat> planes;
    cv::split(ordered, planes);

    DecodedImage out;
    out.bit_depth = bits;
    out.planes.height = m.rows;
    out.planes.width = m.cols;
    out.planes.data.resize(ch, static_cast<Eigen::Index>(m.rows) * m.cols);
    const float inv = static_cast<float>(1.0 / scale);
    for (int c = 0; c < ch; ++c) {
        cv::Mat f;
        planes[c].convertTo(f, CV_32F);
        for (int y = 0; y < m.rows; ++y) {
            const float* row = f.ptr<float>(y);
            for (int x = 0; x < m.cols; ++x) out.planes.at(c, y, x) = row[x] * inv;
        }
    }
    return out;
}

ImageTensor preprocess(const DecodedImage& image, const PreprocessConfig& cfg) {
    const auto& src = image.planes;
    const int in_ch = src.channels();
    std::array<int, 3> map{};
    for (int c = 0; c < 3; ++c) {
        if (cfg.channel_map[c]) {
            map[c] = *cfg.channel_map[c];
        } else {
            // gray and gray+alpha replicate channel 0
            map[c] = in_ch >= 3 ? c : 0;
        }
        if (map[c] >= in_ch)
            throw Error(Errc::ChannelMapError, "channel map references source channel " + std::to_string(map[c]) +
                                                   " but the image has " + std::to_string(in_ch));
    }

    const int m = cfg.pad_multiple;
    const int h = src.height;
    const int w = src.width;
    const int ph = (h + m - 1) / m * m;
    const int pw = (w + m - 1) / m * m;

    ImageTensor t;
    t.source_height = h;
    t.source_width = w;
    t.planes.height = ph;
    t.planes.width = pw;
    t.planes.data.resize(3, static_cast<Eigen::Index>(ph) * pw);
    for (int c = 0; c < 3; ++c) {
        const float mean = cfg.means[c];
        const float std = cfg.stds[c];
        const float fill = cfg.pad == PadFill::Zero ? 0.0f : (0.0f - mean) / std;
        t.planes.data.row(c).setConstant(fill);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) t.planes.at(c, y, x) = (src.at(map[c], y, x) - mean) / std;
    }
    return t;
}

ImageTensor load_and_preprocess(const ImageRecord& record, const PreprocessConfig& cfg,
                                const std::filesystem::path& root) {
    const std::filesystem::path p = root.empty() ? std::filesystem::path(record.image_path) : root / record.image_path;
    return preprocess(decode_image(p), cfg);
}

}  // namespace phenoscope
