#pragma once
// CNN graph representation and the fp32 reference inference path.
//
// A network is an ordered layer list forming a DAG: every layer names its
// producer layers by index (-1 is the network input). Convolution weights
// are {OC, IC, K, K}, fully-connected weights {OUT, IN}; activations are
// {C, H, W}. BatchNorm layers may appear in a loaded graph transiently and
// are folded into the preceding convolution before any quantization.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "phoenix/tensor.hpp"

namespace phoenix {

enum class LayerKind {
    Conv,
    FullyConnected,
    MaxPool,
    AvgPool,
    Relu,
    ResidualAdd,
    Concat,
    BatchNorm,
};

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::FullyConnected: return "fc";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::Relu: return "relu";
        case LayerKind::ResidualAdd: return "residual";
        case LayerKind::Concat: return "concat";
        case LayerKind::BatchNorm: return "batchnorm";
    }
    return "?";
}

struct Layer {
    LayerKind kind = LayerKind::Relu;
    std::string name;
    std::vector<int> inputs;  // producer layer ids; -1 = network input

    // Conv / pool geometry.
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    int in_channels = 0;   // conv
    int out_channels = 0;  // conv
    int in_features = 0;   // fc
    int out_features = 0;  // fc

    Tensor weights;  // conv {OC,IC,K,K}, fc {OUT,IN}
    Tensor bias;     // {OC} / {OUT}

    // BatchNorm parameters, one per channel.
    Tensor bn_gamma, bn_beta, bn_mean, bn_var;
    float bn_eps = 1e-5f;

    bool has_weights() const {
        return kind == LayerKind::Conv || kind == LayerKind::FullyConnected;
    }

    static Layer conv(int in_c, int out_c, int k, int stride = 1, int pad = 0) {
        Layer l;
        l.kind = LayerKind::Conv;
        l.in_channels = in_c;
        l.out_channels = out_c;
        l.kernel = k;
        l.stride = stride;
        l.pad = pad;
        l.weights = Tensor({out_c, in_c, k, k});
        l.bias = Tensor({out_c});
        return l;
    }
    static Layer fully_connected(int in_f, int out_f) {
        Layer l;
        l.kind = LayerKind::FullyConnected;
        l.in_features = in_f;
        l.out_features = out_f;
        l.weights = Tensor({out_f, in_f});
        l.bias = Tensor({out_f});
        return l;
    }
    static Layer maxpool(int k, int stride) {
        Layer l;
        l.kind = LayerKind::MaxPool;
        l.kernel = k;
        l.stride = stride;
        return l;
    }
    static Layer avgpool(int k, int stride) {
        Layer l;
        l.kind = LayerKind::AvgPool;
        l.kernel = k;
        l.stride = stride;
        return l;
    }
    static Layer relu() {
        Layer l;
        l.kind = LayerKind::Relu;
        return l;
    }
    static Layer residual_add(int src_a, int src_b) {
        Layer l;
        l.kind = LayerKind::ResidualAdd;
        l.inputs = {src_a, src_b};
        return l;
    }
    static Layer concat(std::vector<int> srcs) {
        Layer l;
        l.kind = LayerKind::Concat;
        l.inputs = std::move(srcs);
        return l;
    }
    static Layer batchnorm(int channels, float eps = 1e-5f) {
        Layer l;
        l.kind = LayerKind::BatchNorm;
        l.bn_gamma = Tensor({channels});
        l.bn_beta = Tensor({channels});
        l.bn_mean = Tensor({channels});
        l.bn_var = Tensor({channels});
        l.bn_eps = eps;
        return l;
    }
};

struct NetworkGraph {
    std::vector<int> input_shape;  // {C, H, W}
    std::vector<Layer> layers;

    /// Appends a layer; unset inputs default to the previous layer.
    int add(Layer l) {
        if (l.inputs.empty())
            l.inputs = {static_cast<int>(layers.size()) - 1};
        if (l.name.empty())
            l.name = std::string(kind_name(l.kind)) + "_" +
                     std::to_string(layers.size());
        layers.push_back(std::move(l));
        return static_cast<int>(layers.size()) - 1;
    }
};

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad) {
    int span = in + 2 * pad - k;
    if (span < 0 || stride < 1) return -1;
    return span / stride + 1;
}

}  // namespace detail

/// Output shape of every layer; throws on any inconsistency, naming the layer.
inline std::vector<std::vector<int>> layer_shapes(const NetworkGraph& net) {
    if (net.input_shape.size() != 3)
        throw std::invalid_argument("network input shape must be {C,H,W}");
    std::vector<std::vector<int>> shapes(net.layers.size());
    auto shape_of = [&](int id) -> const std::vector<int>& {
        return id < 0 ? net.input_shape : shapes[id];
    };
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& l = net.layers[i];
        auto fail = [&](const std::string& why) {
            throw std::invalid_argument("layer " + l.name + ": " + why);
        };
        for (int src : l.inputs)
            if (src < -1 || src >= static_cast<int>(i))
                fail("input id out of order");
        const auto& in = shape_of(l.inputs.at(0));
        switch (l.kind) {
            case LayerKind::Conv: {
                if (in.size() != 3 || in[0] != l.in_channels)
                    fail("expects " + std::to_string(l.in_channels) +
                         " input channels, got " + shape_str(in));
                int oh = detail::conv_out_extent(in[1], l.kernel, l.stride, l.pad);
                int ow = detail::conv_out_extent(in[2], l.kernel, l.stride, l.pad);
                if (oh <= 0 || ow <= 0) fail("kernel larger than padded input");
                shapes[i] = {l.out_channels, oh, ow};
                break;
            }
            case LayerKind::FullyConnected: {
                if (static_cast<int>(Tensor::element_count(in)) != l.in_features)
                    fail("expects " + std::to_string(l.in_features) +
                         " input features, got " + shape_str(in));
                shapes[i] = {l.out_features, 1, 1};
                break;
            }
            case LayerKind::MaxPool:
            case LayerKind::AvgPool: {
                if (in.size() != 3) fail("pooling needs {C,H,W} input");
                int oh = detail::conv_out_extent(in[1], l.kernel, l.stride, 0);
                int ow = detail::conv_out_extent(in[2], l.kernel, l.stride, 0);
                if (oh <= 0 || ow <= 0) fail("pool window larger than input");
                shapes[i] = {in[0], oh, ow};
                break;
            }
            case LayerKind::Relu:
            case LayerKind::BatchNorm:
                shapes[i] = in;
                break;
            case LayerKind::ResidualAdd: {
                if (l.inputs.size() != 2) fail("residual needs two inputs");
                if (shape_of(l.inputs[0]) != shape_of(l.inputs[1]))
                    fail("residual operands differ: " +
                         shape_str(shape_of(l.inputs[0])) + " vs " +
                         shape_str(shape_of(l.inputs[1])));
                shapes[i] = in;
                break;
            }
            case LayerKind::Concat: {
                if (l.inputs.size() < 2) fail("concat needs two or more inputs");
                int channels = 0;
                for (int src : l.inputs) {
                    const auto& s = shape_of(src);
                    if (s.size() != 3 || s[1] != in[1] || s[2] != in[2])
                        fail("concat operands spatially differ");
                    channels += s[0];
                }
                shapes[i] = {channels, in[1], in[2]};
                break;
            }
        }
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// fp32 reference inference
// ---------------------------------------------------------------------------

/// Standard fp32 forward pass; returns every layer's output (index = layer
/// id) so statistics collection can see all activations.
inline std::vector<Tensor> infer_fp32(const NetworkGraph& net,
                                      const Tensor& input) {
    auto shapes = layer_shapes(net);
    if (input.dims != net.input_shape)
        throw std::invalid_argument("input shape " + shape_str(input.dims) +
                                    " does not match network " +
                                    shape_str(net.input_shape));
    std::vector<Tensor> acts(net.layers.size());
    auto value_of = [&](int id) -> const Tensor& {
        return id < 0 ? input : acts[id];
    };
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& l = net.layers[i];
        const Tensor& in = value_of(l.inputs[0]);
        Tensor out(shapes[i]);
        switch (l.kind) {
            case LayerKind::Conv: {
                const int oc_n = shapes[i][0], oh = shapes[i][1], ow = shapes[i][2];
                const int ic_n = in.dims[0];
                for (int oc = 0; oc < oc_n; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            float acc = l.bias.data[oc];
                            for (int ic = 0; ic < ic_n; ++ic)
                                for (int ky = 0; ky < l.kernel; ++ky)
                                    for (int kx = 0; kx < l.kernel; ++kx) {
                                        int iy = oy * l.stride + ky - l.pad;
                                        int ix = ox * l.stride + kx - l.pad;
                                        if (iy < 0 || iy >= in.dims[1] ||
                                            ix < 0 || ix >= in.dims[2])
                                            continue;
                                        acc += in.at(ic, iy, ix) *
                                               l.weights.data[((static_cast<std::size_t>(oc) * ic_n + ic) * l.kernel + ky) * l.kernel + kx];
                                    }
                            out.at(oc, oy, ox) = acc;
                        }
                break;
            }
            case LayerKind::FullyConnected: {
                for (int o = 0; o < l.out_features; ++o) {
                    float acc = l.bias.data[o];
                    for (int k = 0; k < l.in_features; ++k)
                        acc += l.weights.data[static_cast<std::size_t>(o) * l.in_features + k] * in.data[k];
                    out.data[o] = acc;
                }
                break;
            }
            case LayerKind::MaxPool:
            case LayerKind::AvgPool: {
                const bool is_max = l.kind == LayerKind::MaxPool;
                for (int c = 0; c < shapes[i][0]; ++c)
                    for (int oy = 0; oy < shapes[i][1]; ++oy)
                        for (int ox = 0; ox < shapes[i][2]; ++ox) {
                            float best = -HUGE_VALF;
                            float sum = 0.0f;
                            for (int ky = 0; ky < l.kernel; ++ky)
                                for (int kx = 0; kx < l.kernel; ++kx) {
                                    float v = in.at(c, oy * l.stride + ky,
                                                    ox * l.stride + kx);
                                    best = std::max(best, v);
                                    sum += v;
                                }
                            out.at(c, oy, ox) =
                                is_max ? best : sum / (l.kernel * l.kernel);
                        }
                break;
            }
            case LayerKind::Relu:
                for (std::size_t k = 0; k < in.size(); ++k)
                    out.data[k] = std::max(0.0f, in.data[k]);
                break;
            case LayerKind::BatchNorm: {
                const int h = in.dims[1], w = in.dims[2];
                for (int c = 0; c < in.dims[0]; ++c) {
                    float inv = l.bn_gamma.data[c] /
                                std::sqrt(l.bn_var.data[c] + l.bn_eps);
                    for (int y = 0; y < h; ++y)
                        for (int x = 0; x < w; ++x)
                            out.at(c, y, x) =
                                (in.at(c, y, x) - l.bn_mean.data[c]) * inv +
                                l.bn_beta.data[c];
                }
                break;
            }
            case LayerKind::ResidualAdd: {
                const Tensor& b = value_of(l.inputs[1]);
                for (std::size_t k = 0; k < in.size(); ++k)
                    out.data[k] = in.data[k] + b.data[k];
                break;
            }
            case LayerKind::Concat: {
                std::size_t off = 0;
                for (int src : l.inputs) {
                    const Tensor& t = value_of(src);
                    std::copy(t.data.begin(), t.data.end(),
                              out.data.begin() + off);
                    off += t.size();
                }
                break;
            }
        }
        acts[i] = std::move(out);
    }
    return acts;
}

inline Tensor network_output(const NetworkGraph& net, const Tensor& input) {
    return infer_fp32(net, input).back();
}

// ---------------------------------------------------------------------------
// BatchNorm folding
// ---------------------------------------------------------------------------

/// Folds every BatchNorm into its preceding convolution and drops it from the
/// graph (W *= g/s, b = (b - mean) * g/s + beta with s = sqrt(var + eps)).
/// Consumer indices are remapped. Throws if a BatchNorm does not directly
/// follow a convolution.
inline NetworkGraph fold_batchnorm(const NetworkGraph& net) {
    NetworkGraph out;
    out.input_shape = net.input_shape;
    std::vector<int> remap(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const Layer& l = net.layers[i];
        if (l.kind == LayerKind::BatchNorm) {
            int src = l.inputs.at(0);
            if (src < 0 || net.layers[src].kind != LayerKind::Conv)
                throw std::invalid_argument(
                    "layer " + l.name + ": batchnorm must follow a convolution");
            Layer& conv = out.layers[remap[src]];
            const int oc_n = conv.out_channels;
            const std::size_t per_oc = conv.weights.size() / oc_n;
            for (int oc = 0; oc < oc_n; ++oc) {
                float scale = l.bn_gamma.data[oc] /
                              std::sqrt(l.bn_var.data[oc] + l.bn_eps);
                for (std::size_t k = 0; k < per_oc; ++k)
                    conv.weights.data[oc * per_oc + k] *= scale;
                conv.bias.data[oc] =
                    (conv.bias.data[oc] - l.bn_mean.data[oc]) * scale +
                    l.bn_beta.data[oc];
            }
            remap[i] = remap[src];
            continue;
        }
        Layer copy = l;
        for (int& src : copy.inputs)
            if (src >= 0) src = remap[src];
        remap[i] = static_cast<int>(out.layers.size());
        out.layers.push_back(std::move(copy));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Error reporting
// ---------------------------------------------------------------------------

/// Per-layer and whole-network deviation of an emulated run from a reference.
struct ErrorReport {
    struct LayerError {
        std::string name;
        double relative_l2_pct = 0.0;
        double max_abs = 0.0;
        double changed_code_fraction = 0.0;
    };
    std::vector<LayerError> layers;
    double total_relative_l2_pct = 0.0;
    double total_max_abs = 0.0;
    double total_changed_code_fraction = 0.0;
    bool accumulator_overflow = false;
};

}  // namespace phoenix
