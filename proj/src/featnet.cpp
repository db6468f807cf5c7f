#include "phenoscope/featnet.hpp"

#include "phenoscope/error.hpp"
#include "phenoscope/hash.hpp"

#include "onnx_subset.pb.h"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

namespace phenoscope {

// ---------------------------------------------------------------------------
// TapSpec

TapSpec::TapSpec(std::vector<Tap> taps) : taps_(std::move(taps)) {
    if (taps_.empty()) throw Error(Errc::InvalidArgument, "tap list is empty");
    for (std::size_t i = 0; i < taps_.size(); ++i) {
        if (taps_[i].conv_ordinal < 1)
            throw Error(Errc::InvalidArgument, "tap ordinal must be >= 1");
        if (taps_[i].channels < 1)
            throw Error(Errc::InvalidArgument, "tap channel count must be >= 1");
        if (i > 0 && taps_[i].conv_ordinal <= taps_[i - 1].conv_ordinal)
            throw Error(Errc::InvalidArgument, "tap ordinals must be strictly increasing");
    }
}

TapSpec TapSpec::parse(std::string_view text) {
    std::vector<Tap> taps;
    auto parse_int = [&](std::string_view s) {
        int v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size())
            throw Error(Errc::InvalidArgument, "bad tap spec '" + std::string(text) + "'");
        return v;
    };
    while (!text.empty()) {
        const auto comma = text.find(',');
        const auto item = text.substr(0, comma);
        const auto colon = item.find(':');
        if (colon == std::string_view::npos)
            throw Error(Errc::InvalidArgument, "tap '" + std::string(item) + "' is not ordinal:channels");
        taps.push_back({parse_int(item.substr(0, colon)), parse_int(item.substr(colon + 1))});
        if (comma == std::string_view::npos) break;
        text.remove_prefix(comma + 1);
    }
    return TapSpec(std::move(taps));
}

int TapSpec::feature_dim() const {
    int d = 0;
    for (const auto& t : taps_) d += t.channels;
    return d;
}

std::string TapSpec::str() const {
    std::string s;
    for (const auto& t : taps_) {
        if (!s.empty()) s += ',';
        s += std::to_string(t.conv_ordinal) + ":" + std::to_string(t.channels);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Kernels

FeatureMap conv2d(const FeatureMap& in, const Conv2d& conv) {
    if (in.channels() != conv.in_channels)
        throw Error(Errc::InferenceError, conv.name + ": expected " + std::to_string(conv.in_channels) +
                                              " input channels, got " + std::to_string(in.channels()));
    const int kh_eff = (conv.kernel_h - 1) * conv.dilation_h + 1;
    const int kw_eff = (conv.kernel_w - 1) * conv.dilation_w + 1;
    const int out_h = (in.height + conv.pad_top + conv.pad_bottom - kh_eff) / conv.stride_h + 1;
    const int out_w = (in.width + conv.pad_left + conv.pad_right - kw_eff) / conv.stride_w + 1;
    if (out_h < 1 || out_w < 1)
        throw Error(Errc::InferenceError, conv.name + ": input " + std::to_string(in.height) + "x" +
                                              std::to_string(in.width) + " too small for kernel");

    FeatureMap out;
    out.height = out_h;
    out.width = out_w;
    out.data.resize(conv.out_channels, static_cast<Eigen::Index>(out_h) * out_w);

    const Eigen::Index k = static_cast<Eigen::Index>(conv.in_channels) * conv.kernel_h * conv.kernel_w;
    // Bound the im2col buffer to ~32M floats by processing output rows in chunks.
    constexpr Eigen::Index kBudget = Eigen::Index{1} << 25;
    const int chunk_rows = static_cast<int>(std::clamp<Eigen::Index>(kBudget / (k * out_w), 1, out_h));

    RowMatrixXf cols;
    for (int y0 = 0; y0 < out_h; y0 += chunk_rows) {
        const int rows = std::min(chunk_rows, out_h - y0);
        const Eigen::Index n = static_cast<Eigen::Index>(rows) * out_w;
        cols.resize(k, n);
        Eigen::Index r = 0;
        for (int c = 0; c < conv.in_channels; ++c) {
            for (int ky = 0; ky < conv.kernel_h; ++ky) {
                for (int kx = 0; kx < conv.kernel_w; ++kx, ++r) {
                    float* dst = cols.row(r).data();
                    for (int oy = 0; oy < rows; ++oy) {
                        const int iy = (y0 + oy) * conv.stride_h - conv.pad_top + ky * conv.dilation_h;
                        float* d = dst + static_cast<Eigen::Index>(oy) * out_w;
                        if (iy < 0 || iy >= in.height) {
                            std::fill(d, d + out_w, 0.0f);
                            continue;
                        }
                        const float* src = in.data.row(c).data() + static_cast<Eigen::Index>(iy) * in.width;
                        for (int ox = 0; ox < out_w; ++ox) {
                            const int ix = ox * conv.stride_w - conv.pad_left + kx * conv.dilation_w;
                            d[ox] = (ix < 0 || ix >= in.width) ? 0.0f : src[ix];
                        }
                    }
                }
            }
        }
        const Eigen::Index offset = static_cast<Eigen::Index>(y0) * out_w;
        out.data.middleCols(offset, n).noalias() = conv.weights * cols;
        out.data.middleCols(offset, n).colwise() += conv.bias;
    }
    return out;
}

FeatureMap max_pool2d(const FeatureMap& in, const Pool2d& pool) {
    const int out_h = (in.height + pool.pad_top + pool.pad_bottom - pool.kernel_h) / pool.stride_h + 1;
    const int out_w = (in.width + pool.pad_left + pool.pad_right - pool.kernel_w) / pool.stride_w + 1;
    if (out_h < 1 || out_w < 1) throw Error(Errc::InferenceError, "max pool input too small");
    FeatureMap out;
    out.height = out_h;
    out.width = out_w;
    out.data.resize(in.channels(), static_cast<Eigen::Index>(out_h) * out_w);
    for (int c = 0; c < in.channels(); ++c) {
        for (int oy = 0; oy < out_h; ++oy) {
            for (int ox = 0; ox < out_w; ++ox) {
                float best = -std::numeric_limits<float>::infinity();
                for (int ky = 0; ky < pool.kernel_h; ++ky) {
                    const int iy = oy * pool.stride_h - pool.pad_top + ky;
                    if (iy < 0 || iy >= in.height) continue;
                    for (int kx = 0; kx < pool.kernel_w; ++kx) {
                        const int ix = ox * pool.stride_w - pool.pad_left + kx;
                        if (ix < 0 || ix >= in.width) continue;
                        best = std::max(best, in.at(c, iy, ix));
                    }
                }
                out.at(c, oy, ox) = best;
            }
        }
    }
    return out;
}

void relu_inplace(FeatureMap& m) { m.data = m.data.cwiseMax(0.0f); }

// ---------------------------------------------------------------------------
// ONNX loading

namespace {

using AttrMap = std::map<std::string, const onnx::AttributeProto*>;

AttrMap attributes(const onnx::NodeProto& node) {
    AttrMap m;
    for (const auto& a : node.attribute()) m[a.name()] = &a;
    return m;
}

std::vector<std::int64_t> ints_attr(const AttrMap& a, const std::string& name, std::vector<std::int64_t> dflt) {
    auto it = a.find(name);
    if (it == a.end()) return dflt;
    return {it->second->ints().begin(), it->second->ints().end()};
}

std::int64_t int_attr(const AttrMap& a, const std::string& name, std::int64_t dflt) {
    auto it = a.find(name);
    return it == a.end() ? dflt : it->second->i();
}

std::string string_attr(const AttrMap& a, const std::string& name, std::string dflt) {
    auto it = a.find(name);
    return it == a.end() ? dflt : it->second->s();
}

std::vector<float> tensor_floats(const onnx::TensorProto& t) {
    if (t.data_type() != onnx::TensorProto::FLOAT)
        throw Error(Errc::ModelLoadError, "initializer '" + t.name() + "' is not float32");
    if (t.data_location() == 1)
        throw Error(Errc::ModelLoadError, "initializer '" + t.name() + "' uses external data");
    std::int64_t count = 1;
    for (auto d : t.dims()) count *= d;
    std::vector<float> v(static_cast<std::size_t>(count));
    if (t.has_raw_data()) {
        if (t.raw_data().size() != v.size() * sizeof(float))
            throw Error(Errc::ModelLoadError, "initializer '" + t.name() + "' raw_data size mismatch");
        // ONNX raw_data is little-endian.
        static_assert(std::endian::native == std::endian::little);
        std::memcpy(v.data(), t.raw_data().data(), t.raw_data().size());
    } else {
        if (t.float_data_size() != count)
            throw Error(Errc::ModelLoadError, "initializer '" + t.name() + "' float_data size mismatch");
        std::copy(t.float_data().begin(), t.float_data().end(), v.begin());
    }
    return v;
}

void read_pads(const AttrMap& a, const std::string& op, int& top, int& left, int& bottom, int& right) {
    const auto auto_pad = string_attr(a, "auto_pad", "NOTSET");
    if (auto_pad != "NOTSET" && auto_pad != "VALID")
        throw Error(Errc::ModelLoadError, op + ": auto_pad=" + auto_pad + " is not supported");
    const auto pads = ints_attr(a, "pads", {0, 0, 0, 0});
    if (pads.size() != 4) throw Error(Errc::ModelLoadError, op + ": only 2-D pads are supported");
    top = static_cast<int>(pads[0]);
    left = static_cast<int>(pads[1]);
    bottom = static_cast<int>(pads[2]);
    right = static_cast<int>(pads[3]);
}

}  // namespace

Network Network::from_layers(std::vector<Conv2d> convs, std::vector<Layer> layers, int total_convs,
                             const TapSpec& taps) {
    Network net(taps);
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].ordinal = static_cast<int>(i) + 1;
    net.convs_ = std::move(convs);
    net.layers_ = std::move(layers);
    net.total_convs_ = total_convs;
    net.check_taps();
    return net;
}

void Network::check_taps() const {
    for (const auto& tap : taps_.taps()) {
        if (tap.conv_ordinal > total_convs_)
            throw Error(Errc::TapMismatch, "tap at conv layer " + std::to_string(tap.conv_ordinal) +
                                               " but the graph has only " + std::to_string(total_convs_) +
                                               " convolution layers");
        const auto& conv = convs_.at(static_cast<std::size_t>(tap.conv_ordinal - 1));
        if (conv.out_channels != tap.channels)
            throw Error(Errc::TapMismatch, "conv layer " + std::to_string(tap.conv_ordinal) + ": expected " +
                                               std::to_string(conv.out_channels) + " channels, tap declares " +
                                               std::to_string(tap.channels));
    }
}

Network Network::load(const std::filesystem::path& model_file, const TapSpec& taps,
                      const std::optional<std::string>& expected_sha256) {
    std::ifstream in(model_file, std::ios::binary);
    if (!in) throw Error(Errc::ModelLoadError, "cannot open model " + model_file.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string digest = sha256_hex(bytes);
    if (expected_sha256 && *expected_sha256 != digest)
        throw Error(Errc::ModelLoadError, "model sha256 " + digest + " != expected " + *expected_sha256);

    onnx::ModelProto model;
    if (!model.ParseFromString(bytes) || !model.has_graph())
        throw Error(Errc::ModelLoadError, model_file.string() + " is not an ONNX model");
    const auto& graph = model.graph();

    std::map<std::string, const onnx::TensorProto*> init;
    for (const auto& t : graph.initializer()) init[t.name()] = &t;

    std::string data_input;
    for (const auto& vi : graph.input())
        if (!init.count(vi.name())) {
            if (!data_input.empty()) throw Error(Errc::ModelLoadError, "graph has more than one data input");
            data_input = vi.name();
        }

    std::vector<Conv2d> convs;
    std::vector<Layer> layers;
    std::string current = data_input;
    bool executing = true;  // false once past the deepest tap
    int conv_count = 0;

    for (const auto& node : graph.node()) {
        const auto& op = node.op_type();
        const bool is_conv = op == "Conv";
        if (is_conv) ++conv_count;
        if (!executing) {
            if (is_conv) {
                // Still record the convolution's shape so out-of-range taps can be diagnosed.
                Conv2d c;
                c.ordinal = conv_count;
                if (node.input_size() >= 2 && init.count(node.input(1)) && init[node.input(1)]->dims_size() == 4)
                    c.out_channels = static_cast<int>(init[node.input(1)]->dims(0));
                convs.push_back(std::move(c));
            }
            continue;
        }
        if (node.input_size() < 1 || node.output_size() < 1)
            throw Error(Errc::ModelLoadError, "node '" + node.name() + "' has no input or output");
        if (!current.empty() && node.input(0) != current)
            throw Error(Errc::ModelLoadError, "node '" + node.name() + "' (" + op +
                                                  ") is not part of a feed-forward chain");
        const AttrMap a = attributes(node);

        if (is_conv) {
            if (node.input_size() < 2 || !init.count(node.input(1)))
                throw Error(Errc::ModelLoadError, "Conv '" + node.name() + "' has no weight initializer");
            const auto& wt = *init[node.input(1)];
            if (wt.dims_size() != 4) throw Error(Errc::ModelLoadError, "Conv weights must be 4-D");
            if (int_attr(a, "group", 1) != 1)
                throw Error(Errc::ModelLoadError, "grouped convolution is not supported");
            Conv2d c;
            c.ordinal = conv_count;
            c.name = node.name().empty() ? "conv" + std::to_string(conv_count) : node.name();
            c.out_channels = static_cast<int>(wt.dims(0));
            c.in_channels = static_cast<int>(wt.dims(1));
            c.kernel_h = static_cast<int>(wt.dims(2));
            c.kernel_w = static_cast<int>(wt.dims(3));
            const auto strides = ints_attr(a, "strides", {1, 1});
            const auto dil = ints_attr(a, "dilations", {1, 1});
            if (strides.size() != 2 || dil.size() != 2)
                throw Error(Errc::ModelLoadError, "only 2-D convolution is supported");
            c.stride_h = static_cast<int>(strides[0]);
            c.stride_w = static_cast<int>(strides[1]);
            c.dilation_h = static_cast<int>(dil[0]);
            c.dilation_w = static_cast<int>(dil[1]);
            read_pads(a, "Conv", c.pad_top, c.pad_left, c.pad_bottom, c.pad_right);
            const auto w = tensor_floats(wt);
            const Eigen::Index k = static_cast<Eigen::Index>(c.in_channels) * c.kernel_h * c.kernel_w;
            c.weights = Eigen::Map<const RowMatrixXf>(w.data(), c.out_channels, k);
            c.bias = Eigen::VectorXf::Zero(c.out_channels);
            if (node.input_size() >= 3 && !node.input(2).empty()) {
                if (!init.count(node.input(2)))
                    throw Error(Errc::ModelLoadError, "Conv '" + node.name() + "' bias is not an initializer");
                const auto b = tensor_floats(*init[node.input(2)]);
                if (static_cast<int>(b.size()) != c.out_channels)
                    throw Error(Errc::ModelLoadError, "Conv '" + node.name() + "' bias length mismatch");
                c.bias = Eigen::Map<const Eigen::VectorXf>(b.data(), c.out_channels);
            }
            layers.push_back({Layer::Kind::Conv, static_cast<int>(convs.size()), {}});
            convs.push_back(std::move(c));
            if (conv_count == taps.deepest()) executing = false;
        } else if (op == "Relu") {
            layers.push_back({Layer::Kind::Relu, -1, {}});
        } else if (op == "MaxPool") {
            Pool2d p;
            const auto ks = ints_attr(a, "kernel_shape", {});
            const auto strides = ints_attr(a, "strides", {1, 1});
            if (ks.size() != 2 || strides.size() != 2)
                throw Error(Errc::ModelLoadError, "only 2-D MaxPool is supported");
            if (int_attr(a, "ceil_mode", 0) != 0) throw Error(Errc::ModelLoadError, "MaxPool ceil_mode unsupported");
            const auto dil = ints_attr(a, "dilations", {1, 1});
            if (dil != std::vector<std::int64_t>{1, 1})
                throw Error(Errc::ModelLoadError, "dilated MaxPool is not supported");
            p.kernel_h = static_cast<int>(ks[0]);
            p.kernel_w = static_cast<int>(ks[1]);
            p.stride_h = static_cast<int>(strides[0]);
            p.stride_w = static_cast<int>(strides[1]);
            read_pads(a, "MaxPool", p.pad_top, p.pad_left, p.pad_bottom, p.pad_right);
            layers.push_back({Layer::Kind::MaxPool, -1, p});
        } else if (op == "Identity" || op == "Dropout") {
            // inference no-ops
        } else {
            throw Error(Errc::ModelLoadError, "operator '" + op + "' before the deepest tap is not supported");
        }
        current = node.output(0);
    }

    Network net(taps);
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].ordinal = static_cast<int>(i) + 1;
    net.convs_ = std::move(convs);
    net.layers_ = std::move(layers);
    net.total_convs_ = conv_count;
    net.sha256_ = digest;
    if (conv_count == 0) throw Error(Errc::ModelLoadError, "graph contains no convolution layers");
    net.check_taps();
    return net;
}

std::vector<FeatureMap> Network::forward_taps(const ImageTensor& img) const {
    if (img.planes.channels() != 3) throw Error(Errc::InferenceError, "input must have 3 channels");
    std::vector<FeatureMap> out;
    out.reserve(taps_.taps().size());
    auto next_tap = taps_.taps().begin();

    FeatureMap x = img.planes;
    for (const auto& layer : layers_) {
        switch (layer.kind) {
            case Layer::Kind::Conv: {
                const auto& conv = convs_[static_cast<std::size_t>(layer.conv_index)];
                x = conv2d(x, conv);
                if (next_tap != taps_.taps().end() && next_tap->conv_ordinal == conv.ordinal) {
                    out.push_back(x);
                    ++next_tap;
                }
                break;
            }
            case Layer::Kind::Relu: relu_inplace(x); break;
            case Layer::Kind::MaxPool: x = max_pool2d(x, layer.pool); break;
        }
        if (next_tap == taps_.taps().end()) break;
    }
    if (!x.data.allFinite()) throw Error(Errc::InferenceError, "non-finite activations");
    return out;
}

// ---------------------------------------------------------------------------
// Pooling and extraction

Eigen::VectorXd mean_pool_concat(std::span<const FeatureMap> maps) {
    if (maps.empty()) throw Error(Errc::EmptyInput, "no feature maps to pool");
    Eigen::Index total = 0;
    for (const auto& m : maps) total += m.data.rows();
    Eigen::VectorXd v(total);
    Eigen::Index o = 0;
    for (const auto& m : maps) {
        const Eigen::Index n = m.data.cols();
        for (Eigen::Index c = 0; c < m.data.rows(); ++c) {
            double sum = 0.0;
            const float* p = m.data.row(c).data();
            for (Eigen::Index i = 0; i < n; ++i) sum += static_cast<double>(p[i]);
            v[o++] = sum / static_cast<double>(n);
        }
    }
    return v;
}

ExtractResult extract_features(const Network& net, const std::vector<ImageRecord>& records,
                               const PreprocessConfig& cfg, const std::filesystem::path& image_root,
                               const ExtractOptions& opts) {
    if (records.empty()) throw Error(Errc::EmptyInput, "no records to extract");
    if (opts.batch < 1) throw Error(Errc::InvalidArgument, "batch must be >= 1");

    const std::size_t n = records.size();
    const auto dim = static_cast<Eigen::Index>(net.feature_dim());
    RowMatrixXf values(static_cast<Eigen::Index>(n), dim);
    std::vector<std::optional<std::pair<Errc, std::string>>> errors(n);

    const std::size_t batch = static_cast<std::size_t>(opts.batch);
    const std::size_t batches = (n + batch - 1) / batch;
    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    std::atomic<bool> abort{false};
    std::mutex progress_mu;

    auto worker = [&] {
        for (std::size_t b = next++; b < batches && !abort; b = next++) {
            for (std::size_t i = b * batch; i < std::min(n, (b + 1) * batch); ++i) {
                try {
                    const auto t = load_and_preprocess(records[i], cfg, image_root);
                    const auto maps = net.forward_taps(t);
                    values.row(static_cast<Eigen::Index>(i)) = mean_pool_concat(maps).cast<float>().transpose();
                } catch (const Error& e) {
                    errors[i] = {e.code(), e.detail()};
                    if (!opts.skip_failures) abort = true;
                } catch (const std::exception& e) {
                    errors[i] = {Errc::InferenceError, e.what()};
                    if (!opts.skip_failures) abort = true;
                }
            }
            const std::size_t d = done += std::min(n, (b + 1) * batch) - b * batch;
            if (opts.progress) {
                std::lock_guard lock(progress_mu);
                opts.progress(d, n);
            }
        }
    };

    const int threads = std::max(1, opts.threads);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    ExtractResult result;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < n; ++i) {
        if (errors[i]) {
            if (!opts.skip_failures)
                throw Error(errors[i]->first, records[i].key().str() + ": " + errors[i]->second);
            result.failures.emplace_back(records[i].key(), errors[i]->second);
        } else {
            keep.push_back(static_cast<Eigen::Index>(i));
        }
    }
    if (keep.empty()) throw Error(Errc::EmptyInput, "every record failed extraction");
    if (keep.size() == n) {
        result.features.values = std::move(values);
    } else {
        result.features.values = values(keep, Eigen::all);
    }
    for (auto i : keep) result.features.row_ids.push_back(records[static_cast<std::size_t>(i)].key());
    return result;
}

}  // namespace phenoscope
