#pragma once

#include "phenoscope/ingest.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace phenoscope {

struct ChannelIntensity {
    double mean = 0.5;
    double std = 0.0;
};

// Visual parameters of one synthetic phenotype: discs standing in for cells.
struct PhenotypeSpec {
    std::string label;
    double cell_count_mean = 10.0;          // Poisson rate per field
    std::pair<double, double> cell_radius_px{4.0, 8.0};
    std::vector<ChannelIntensity> intensity;  // one entry per image channel (1 or 3)
    double texture_freq = 0.0;              // cycles per image; 0 disables modulation

    void validate() const;
};

struct SynthConfig {
    std::vector<PhenotypeSpec> phenotypes;
    int wells_per_phenotype = 30;
    int fields_per_well = 4;
    int image_size = 96;
    int compounds_per_chem_cluster = 5;
    std::uint64_t seed = 0;
    // Relative parameter jitter applied per chemical cluster, then per compound (well).
    double cluster_jitter = 0.08;
    double compound_jitter = 0.02;
    int plate_rows = 16;
    int plate_cols = 24;
    int threads = 1;

    void validate() const;
    int total_images() const {
        return static_cast<int>(phenotypes.size()) * wells_per_phenotype * fields_per_well;
    }

    static SynthConfig from_json_text(const std::string& text);
    static SynthConfig load(const std::filesystem::path& file);
};

inline constexpr double kBackgroundLevel = 0.02;
inline constexpr double kSensorNoiseSigma = 0.01;
inline constexpr double kTextureAmplitude = 0.3;

// Single field of view with values in [0, 1]; channels = spec.intensity.size().
Planes render_field(const PhenotypeSpec& spec, std::mt19937_64& rng, int image_size);

// Writes images/<plate>/<well>_f<field>.png (16-bit), manifest.csv and ground_truth.json.
// Returns the manifest path.
std::filesystem::path generate_screen(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Independent generator stream for one field, derived from (seed, plate, well, field).
std::mt19937_64 field_rng(std::uint64_t seed, int plate_index, int well_index, int field_index);

}  // namespace phenoscope
