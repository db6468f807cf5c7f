#pragma once

#include "phenoscope/types.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace phenoscope {

// One field-of-view image plus its screen metadata.
struct ImageRecord {
    std::string image_path;  // relative to the manifest directory
    std::string plate_id;
    std::string well_id;
    int field_index = 0;
    std::string compound_id;
    std::string chem_cluster_id;
    std::optional<std::string> phenotype_label;

    RowKey key() const { return {plate_id, well_id, field_index}; }
};

inline constexpr std::array<const char*, 6> kManifestColumns = {
    "image_path", "plate_id", "well_id", "field_index", "compound_id", "chem_cluster_id"};

std::vector<ImageRecord> parse_manifest(const std::filesystem::path& manifest_file);
std::vector<ImageRecord> parse_manifest_text(const std::string& csv_text);
void write_manifest(const std::filesystem::path& manifest_file, const std::vector<ImageRecord>& records);

enum class PadFill { NormalizedZero, Zero };

struct PreprocessConfig {
    // Output channel (R, G, B) -> source channel index in the decoded file.
    // Unset entries default to identity, or replication of channel 0 for single-channel files.
    std::array<std::optional<int>, 3> channel_map{};
    std::array<float, 3> means{0.485f, 0.456f, 0.406f};
    std::array<float, 3> stds{0.229f, 0.224f, 0.225f};
    PadFill pad = PadFill::NormalizedZero;
    int pad_multiple = 16;

    static PreprocessConfig from_json_text(const std::string& text);
    static PreprocessConfig load(const std::filesystem::path& file);
    std::string to_json_text() const;
};

// Channel-planar image: data is channels x (height*width), row-major within a plane.
struct Planes {
    int height = 0;
    int width = 0;
    RowMatrixXf data;

    int channels() const { return static_cast<int>(data.rows()); }
    float at(int c, int y, int x) const { return data(c, static_cast<Eigen::Index>(y) * width + x); }
    float& at(int c, int y, int x) { return data(c, static_cast<Eigen::Index>(y) * width + x); }
};

struct DecodedImage {
    Planes planes;  // values scaled to [0,1] by bit depth
    int bit_depth = 8;
};

struct ImageTensor {
    Planes planes;  // exactly 3 channels, padded dims
    int source_height = 0;
    int source_width = 0;

    int height() const { return planes.height; }
    int width() const { return planes.width; }
};

DecodedImage decode_image(const std::filesystem::path& file);

ImageTensor preprocess(const DecodedImage& image, const PreprocessConfig& cfg);

// `root` is the directory image paths are relative to.
ImageTensor load_and_preprocess(const ImageRecord& record, const PreprocessConfig& cfg,
                                const std::filesystem::path& root = {});

}  // namespace phenoscope
