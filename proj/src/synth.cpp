#include "phenoscope/synth.hpp"

#include "phenoscope/error.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>
#include <atomic>

namespace phenoscope {

namespace fs = std::filesystem;

void PhenotypeSpec::validate() const {
    if (label.empty()) throw Error(Errc::InvalidArgument, "phenotype label is empty");
    if (!(cell_count_mean >= 0.0)) throw Error(Errc::InvalidArgument, label + ": cell_count_mean must be >= 0");
    if (!(cell_radius_px.first > 0.0) || cell_radius_px.second < cell_radius_px.first)
        throw Error(Errc::InvalidArgument, label + ": cell radii must satisfy 0 < min <= max");
    if (intensity.size() != 1 && intensity.size() != 3)
        throw Error(Errc::InvalidArgument, label + ": intensity must list 1 or 3 channels");
    for (const auto& ch : intensity)
        if (ch.mean < 0.0 || ch.mean > 1.0 || ch.std < 0.0)
            throw Error(Errc::InvalidArgument, label + ": intensity means must lie in [0,1], stds >= 0");
    if (texture_freq < 0.0) throw Error(Errc::InvalidArgument, label + ": texture_freq must be >= 0");
}

void SynthConfig::validate() const {
    if (phenotypes.empty()) throw Error(Errc::InvalidArgument, "no phenotypes");
    std::set<std::string> labels;
    for (const auto& p : phenotypes) {
        p.validate();
        if (!labels.insert(p.label).second) throw Error(Errc::InvalidArgument, "duplicate phenotype " + p.label);
        if (p.intensity.size() != phenotypes.front().intensity.size())
            throw Error(Errc::InvalidArgument, "all phenotypes must have the same channel count");
    }
    if (wells_per_phenotype < 1) throw Error(Errc::InvalidArgument, "wells_per_phenotype must be >= 1");
    if (fields_per_well < 1) throw Error(Errc::InvalidArgument, "fields_per_well must be >= 1");
    if (image_size < 8) throw Error(Errc::InvalidArgument, "image_size must be >= 8");
    if (compounds_per_chem_cluster < 1) throw Error(Errc::InvalidArgument, "compounds_per_chem_cluster must be >= 1");
    if (plate_rows < 1 || plate_rows > 26 || plate_cols < 1)
        throw Error(Errc::InvalidArgument, "plate must have 1-26 rows and >= 1 column");
    if (cluster_jitter < 0.0 || compound_jitter < 0.0) throw Error(Errc::InvalidArgument, "jitter must be >= 0");
}

SynthConfig SynthConfig::from_json_text(const std::string& text) {
    SynthConfig cfg;
    try {
        const auto j = nlohmann::json::parse(text);
        cfg.wells_per_phenotype = j.value("wells_per_phenotype", cfg.wells_per_phenotype);
        cfg.fields_per_well = j.value("fields_per_well", cfg.fields_per_well);
        cfg.image_size = j.value("image_size", cfg.image_size);
        cfg.compounds_per_chem_cluster = j.value("compounds_per_chem_cluster", cfg.compounds_per_chem_cluster);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.cluster_jitter = j.value("cluster_jitter", cfg.cluster_jitter);
        cfg.compound_jitter = j.value("compound_jitter", cfg.compound_jitter);
        cfg.plate_rows = j.value("plate_rows", cfg.plate_rows);
        cfg.plate_cols = j.value("plate_cols", cfg.plate_cols);
        cfg.threads = j.value("threads", cfg.threads);
        for (const auto& pj : j.at("phenotypes")) {
            PhenotypeSpec p;
            p.label = pj.at("label").get<std::string>();
            p.cell_count_mean = pj.value("cell_count_mean", p.cell_count_mean);
            if (pj.contains("cell_radius_px")) {
                const auto r = pj.at("cell_radius_px").get<std::vector<double>>();
                if (r.size() != 2) throw Error(Errc::InvalidArgument, p.label + ": cell_radius_px needs [min, max]");
                p.cell_radius_px = {r[0], r[1]};
            }
            for (const auto& ij : pj.at("intensity")) {
                const auto v = ij.get<std::vector<double>>();
                if (v.size() != 2) throw Error(Errc::InvalidArgument, p.label + ": intensity entries are [mean, std]");
                p.intensity.push_back({v[0], v[1]});
            }
            p.texture_freq = pj.value("texture_freq", p.texture_freq);
            cfg.phenotypes.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidArgument, std::string("synth config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

SynthConfig SynthConfig::load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(Errc::IoError, "cannot open synth config " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::mt19937_64 field_rng(std::uint64_t seed, int plate_index, int well_index, int field_index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(plate_index), static_cast<std::uint32_t>(well_index),
                      static_cast<std::uint32_t>(field_index)};
    return std::mt19937_64(seq);
}

Planes render_field(const PhenotypeSpec& spec, std::mt19937_64& rng, int image_size) {
    const int channels = static_cast<int>(spec.intensity.size());
    const int n = image_size;
    Planes img;
    img.height = n;
    img.width = n;
    img.data = RowMatrixXf::Zero(channels, static_cast<Eigen::Index>(n) * n);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int cells = 0;
    if (spec.cell_count_mean > 0.0) {
        std::poisson_distribution<int> count(spec.cell_count_mean);
        cells = count(rng);
    }

    std::vector<double> level(static_cast<std::size_t>(channels));
    for (int cell = 0; cell < cells; ++cell) {
        const double cx = unit(rng) * n;
        const double cy = unit(rng) * n;
        const double r = spec.cell_radius_px.first + unit(rng) * (spec.cell_radius_px.second - spec.cell_radius_px.first);
        for (int c = 0; c < channels; ++c) {
            std::normal_distribution<double> draw(spec.intensity[static_cast<std::size_t>(c)].mean,
                                                  spec.intensity[static_cast<std::size_t>(c)].std);
            level[static_cast<std::size_t>(c)] = std::clamp(spec.intensity[static_cast<std::size_t>(c)].std > 0.0
                                                                ? draw(rng)
                                                                : spec.intensity[static_cast<std::size_t>(c)].mean,
                                                            0.0, 1.0);
        }
        const double theta = unit(rng) * 2.0 * std::numbers::pi;
        const double phase = unit(rng) * 2.0 * std::numbers::pi;
        const double k = 2.0 * std::numbers::pi * spec.texture_freq / n;

        const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
        const int y1 = std::min(n - 1, static_cast<int>(std::ceil(cy + r + 1)));
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
        const int x1 = std::min(n - 1, static_cast<int>(std::ceil(cx + r + 1)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double dist = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
                const double coverage = std::clamp(r + 0.5 - dist, 0.0, 1.0);
                if (coverage <= 0.0) continue;
                double mod = 1.0;
                if (spec.texture_freq > 0.0) {
                    const double s = std::sin(k * (x * std::cos(theta) + y * std::sin(theta)) + phase);
                    mod = 1.0 - kTextureAmplitude * 0.5 * (1.0 + s);
                }
                for (int c = 0; c < channels; ++c) {
                    float& px = img.at(c, y, x);
                    px = std::max(px, static_cast<float>(coverage * level[static_cast<std::size_t>(c)] * mod));
                }
            }
        }
    }

    std::normal_distribution<double> noise(0.0, kSensorNoiseSigma);
    for (int c = 0; c < channels; ++c)
        for (Eigen::Index i = 0; i < img.data.cols(); ++i) {
            const double v = std::max<double>(kBackgroundLevel, img.data(c, i)) + noise(rng);
            img.data(c, i) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return img;
}

namespace {

std::mt19937_64 tagged_rng(std::uint64_t seed, std::uint32_t tag, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag,
                      static_cast<std::uint32_t>(index)};
    return std::mt19937_64(seq);
}

PhenotypeSpec jitter(const PhenotypeSpec& base, double amount, std::mt19937_64& rng) {
    if (amount == 0.0) return base;
    std::normal_distribution<double> z(0.0, 1.0);
    auto scale = [&] { return std::max(0.05, 1.0 + amount * z(rng)); };
    PhenotypeSpec p = base;
    p.cell_count_mean = base.cell_count_mean * scale();
    const double rs = scale();
    p.cell_radius_px = {base.cell_radius_px.first * rs, base.cell_radius_px.second * rs};
    for (auto& ch : p.intensity) ch.mean = std::clamp(ch.mean * scale(), 0.0, 1.0);
    return p;
}

std::string well_name(int row, int col) {
    std::string s(1, static_cast<char>('A' + row));
    if (col + 1 < 10) s += '0';
    return s + std::to_string(col + 1);
}

std::string padded(const std::string& prefix, int v, int width) {
    std::string digits = std::to_string(v);
    if (static_cast<int>(digits.size()) < width) digits.insert(0, static_cast<std::size_t>(width) - digits.size(), '0');
    return prefix + digits;
}

void write_png16(const fs::path& file, const Planes& img) {
    const int ch = img.channels();
    cv::Mat m(img.height, img.width, ch == 1 ? CV_16UC1 : CV_16UC3);
    for (int y = 0; y < img.height; ++y) {
        auto* row = m.ptr<std::uint16_t>(y);
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < ch; ++c) {
                // OpenCV writes BGR order
                const int dst = ch == 1 ? 0 : 2 - c;
                row[x * ch + dst] = static_cast<std::uint16_t>(std::lround(img.at(c, y, x) * 65535.0f));
            }
        }
    }
    if (!cv::imwrite(file.string(), m)) throw Error(Errc::IoError, "cannot write " + file.string());
}

struct Job {
    ImageRecord record;
    PhenotypeSpec spec;
    int plate_index;
    int well_index;
};

}  // namespace

fs::path generate_screen(const SynthConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (ec) throw Error(Errc::IoError, "cannot create " + (out_dir / "images").string() + ": " + ec.message());

    const int phenos = static_cast<int>(cfg.phenotypes.size());
    const int wells_per_plate = cfg.plate_rows * cfg.plate_cols;

    // Chemical clusters partition each phenotype's compounds; one compound per well.
    const int clusters_per_pheno = (cfg.wells_per_phenotype + cfg.compounds_per_chem_cluster - 1) /
                                   cfg.compounds_per_chem_cluster;
    std::vector<PhenotypeSpec> cluster_spec;
    for (int p = 0; p < phenos; ++p)
        for (int c = 0; c < clusters_per_pheno; ++c) {
            auto rng = tagged_rng(cfg.seed, 0xC1u, p * clusters_per_pheno + c);
            cluster_spec.push_back(jitter(cfg.phenotypes[static_cast<std::size_t>(p)], cfg.cluster_jitter, rng));
        }

    std::vector<Job> jobs;
    nlohmann::json truth = nlohmann::json::object();
    int well_counter = 0;
    // Interleave phenotypes across the plate layout.
    for (int w = 0; w < cfg.wells_per_phenotype; ++w) {
        for (int p = 0; p < phenos; ++p, ++well_counter) {
            const int cluster = p * clusters_per_pheno + w / cfg.compounds_per_chem_cluster;
            const int compound = p * cfg.wells_per_phenotype + w;
            auto rng = tagged_rng(cfg.seed, 0xC0u, compound);
            const PhenotypeSpec spec = jitter(cluster_spec[static_cast<std::size_t>(cluster)], cfg.compound_jitter, rng);

            const int plate_index = well_counter / wells_per_plate;
            const int slot = well_counter % wells_per_plate;
            const std::string plate = padded("P", plate_index + 1, 2);
            const std::string well = well_name(slot / cfg.plate_cols, slot % cfg.plate_cols);
            const std::string compound_id = padded("CMP", compound + 1, 5);
            truth[compound_id] = cfg.phenotypes[static_cast<std::size_t>(p)].label;
            for (int f = 0; f < cfg.fields_per_well; ++f) {
                ImageRecord r;
                r.image_path = "images/" + plate + "/" + well + "_f" + std::to_string(f) + ".png";
                r.plate_id = plate;
                r.well_id = well;
                r.field_index = f;
                r.compound_id = compound_id;
                r.chem_cluster_id = padded("CC", cluster + 1, 4);
                r.phenotype_label = cfg.phenotypes[static_cast<std::size_t>(p)].label;
                jobs.push_back({std::move(r), spec, plate_index, slot});
            }
        }
    }

    for (int plate = 0; plate <= (well_counter - 1) / wells_per_plate; ++plate) {
        fs::create_directories(out_dir / "images" / padded("P", plate + 1, 2), ec);
        if (ec) throw Error(Errc::IoError, "cannot create plate directory: " + ec.message());
    }

    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(jobs.size());
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const auto& job = jobs[i];
            try {
                auto rng = field_rng(cfg.seed, job.plate_index, job.well_index, job.record.field_index);
                write_png16(out_dir / job.record.image_path, render_field(job.spec, rng, cfg.image_size));
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    if (cfg.threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < cfg.threads; ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors)
        if (!e.empty()) throw Error(Errc::IoError, e);

    std::vector<ImageRecord> records;
    records.reserve(jobs.size());
    for (auto& j : jobs) records.push_back(std::move(j.record));
    const fs::path manifest = out_dir / "manifest.csv";
    write_manifest(manifest, records);

    std::ofstream gt(out_dir / "ground_truth.json", std::ios::trunc);
    if (!gt) throw Error(Errc::IoError, "cannot write ground_truth.json");
    gt << truth.dump(2) << '\n';
    return manifest;
}

}  // namespace phenoscope
