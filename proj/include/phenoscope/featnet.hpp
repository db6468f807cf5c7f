#pragma once

#include "phenoscope/ingest.hpp"
#include "phenoscope/types.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace phenoscope {

struct Tap {
    int conv_ordinal = 0;  // 1-based, counting convolution layers only
    int channels = 0;

    bool operator==(const Tap&) const = default;
};

// Ordered set of convolution layers whose pre-activation outputs are pooled.
class TapSpec {
public:
    // Throws InvalidArgument unless ordinals are >= 1 and strictly increasing.
    explicit TapSpec(std::vector<Tap> taps);

    // "4:128,7:256,9:512"
    static TapSpec parse(std::string_view text);

    // 4th, 7th and 9th VGG16 convolutions: 128 + 256 + 512 = 896 features.
    static TapSpec vgg16_default() { return TapSpec({{4, 128}, {7, 256}, {9, 512}}); }

    const std::vector<Tap>& taps() const { return taps_; }
    int feature_dim() const;
    int deepest() const { return taps_.back().conv_ordinal; }
    std::string str() const;

private:
    std::vector<Tap> taps_;
};

// A (channels, H, W) activation; same planar layout as image tensors.
using FeatureMap = Planes;

struct Conv2d {
    int ordinal = 0;
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    int kernel_h = 0, kernel_w = 0;
    int stride_h = 1, stride_w = 1;
    int pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;
    int dilation_h = 1, dilation_w = 1;
    RowMatrixXf weights;  // out_channels x (in_channels * kernel_h * kernel_w)
    Eigen::VectorXf bias;
};

struct Pool2d {
    int kernel_h = 0, kernel_w = 0;
    int stride_h = 1, stride_w = 1;
    int pad_top = 0, pad_left = 0, pad_bottom = 0, pad_right = 0;
};

FeatureMap conv2d(const FeatureMap& in, const Conv2d& conv);
FeatureMap max_pool2d(const FeatureMap& in, const Pool2d& pool);
void relu_inplace(FeatureMap& m);

// Executable prefix of a feed-forward convolutional graph, truncated after the deepest tap.
class Network {
public:
    struct Layer {
        enum class Kind { Conv, Relu, MaxPool } kind;
        int conv_index = -1;  // into convs() for Kind::Conv
        Pool2d pool;
    };

    // expected_sha256, when given, must match the model file's digest.
    static Network load(const std::filesystem::path& model_file, const TapSpec& taps,
                        const std::optional<std::string>& expected_sha256 = std::nullopt);

    // Assembles a network from in-memory layers; convs are in graph order and ordinals are
    // assigned from their position. Validates taps the same way load() does.
    static Network from_layers(std::vector<Conv2d> convs, std::vector<Layer> layers, int total_convs,
                               const TapSpec& taps);

    const TapSpec& taps() const { return taps_; }
    int feature_dim() const { return taps_.feature_dim(); }
    // Convolutions present in the full graph (not just the executed prefix).
    int total_convs() const { return total_convs_; }
    const std::vector<Conv2d>& convs() const { return convs_; }
    const std::string& sha256() const { return sha256_; }

    // One pre-activation map per tap, in tap order.
    std::vector<FeatureMap> forward_taps(const ImageTensor& img) const;

private:
    Network(TapSpec taps) : taps_(std::move(taps)) {}
    void check_taps() const;

    TapSpec taps_;
    std::vector<Conv2d> convs_;
    std::vector<Layer> layers_;
    int total_convs_ = 0;
    std::string sha256_;
};

// Per-channel spatial means of each map, concatenated in order. Sums are accumulated
// row-major in double, then divided by H*W; stored features are the float32 rounding.
Eigen::VectorXd mean_pool_concat(std::span<const FeatureMap> maps);

struct ExtractOptions {
    int batch = 1;
    int threads = 1;
    bool skip_failures = false;
    std::function<void(std::size_t done, std::size_t total)> progress;
};

struct ExtractResult {
    FeatureMatrix features;
    std::vector<std::pair<RowKey, std::string>> failures;  // only populated with skip_failures
};

ExtractResult extract_features(const Network& net, const std::vector<ImageRecord>& records,
                               const PreprocessConfig& cfg, const std::filesystem::path& image_root,
                               const ExtractOptions& opts = {});

}  // namespace phenoscope
