#pragma once
// Post-training MaEb quantization: per-layer activation statistics,
// normalization merging, power-of-two scale search, and whole-network
// quantization with one shared activation scale.
//
// The flow is normalize -> merge normalization parameters -> quantize.
// Normalizing every layer output by sqrt(E((O^m)^2)) costs nothing at
// inference because the divisor of layer m and the matching multiplier of
// layer m+1 fold into layer m+1's weights:
//
//   W'^{m+1} = W^{m+1} * sqrt(E((O^m)^2)) / sqrt(E((O^{m+1})^2))
//   b'^{m+1} = b^{m+1} / sqrt(E((O^{m+1})^2))
//
// Pass-through layers (relu, pooling) commute with positive scaling and
// simply inherit their producer's normalizer. Every branch feeding a
// residual add or concat is normalized by the join's own output moment so
// the join operates on a single shared scale.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phoenix/minifloat.hpp"
#include "phoenix/netgraph.hpp"

namespace phoenix {

enum class StatsMode { SecondMoment, MeanStd };

inline const char* stats_mode_name(StatsMode m) {
    return m == StatsMode::SecondMoment ? "second_moment" : "mean_std";
}

/// Per-layer activation statistics over the calibration batch.
struct LayerStats {
    double second_moment = 0.0;  // E((O^m)^2)
    double mean = 0.0;           // mu(O^m), mean_std mode only
    double stddev = 0.0;         // sigma(O^m), mean_std mode only
    std::int64_t sample_count = 0;
    bool has_mean_std = false;
};

/// (1/N) * sum(x_j^2) over all elements.
inline double second_moment(const std::vector<float>& values) {
    if (values.empty())
        throw std::invalid_argument("second_moment: empty tensor");
    double s = 0.0;
    for (float v : values) s += static_cast<double>(v) * v;
    return s / static_cast<double>(values.size());
}

/// Runs fp32 reference inference over the calibration images and pools the
/// per-layer statistics across the whole batch.
inline std::vector<LayerStats> collect_stats(const NetworkGraph& net,
                                             const std::vector<Tensor>& calib,
                                             StatsMode mode) {
    if (calib.empty())
        throw std::invalid_argument("collect_stats: empty calibration set");
    std::vector<double> sum(net.layers.size(), 0.0);
    std::vector<double> sum_sq(net.layers.size(), 0.0);
    std::vector<std::int64_t> count(net.layers.size(), 0);
    for (const Tensor& img : calib) {
        auto acts = infer_fp32(net, img);
        for (std::size_t m = 0; m < acts.size(); ++m) {
            for (float v : acts[m].data) {
                sum[m] += v;
                sum_sq[m] += static_cast<double>(v) * v;
            }
            count[m] += static_cast<std::int64_t>(acts[m].size());
        }
    }
    std::vector<LayerStats> stats(net.layers.size());
    for (std::size_t m = 0; m < stats.size(); ++m) {
        stats[m].sample_count = count[m];
        stats[m].second_moment = sum_sq[m] / static_cast<double>(count[m]);
        if (mode == StatsMode::MeanStd) {
            stats[m].has_mean_std = true;
            stats[m].mean = sum[m] / static_cast<double>(count[m]);
            double var = stats[m].second_moment - stats[m].mean * stats[m].mean;
            stats[m].stddev = std::sqrt(std::max(0.0, var));
        }
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Normalizer assignment and merging
// ---------------------------------------------------------------------------

/// Thrown for numerically degenerate inputs (identically zero activations,
/// zero variance); distinct from parse/usage failures.
struct DegeneracyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline double stats_divisor(const LayerStats& s, StatsMode mode,
                            const std::string& layer_name) {
    double d = mode == StatsMode::SecondMoment ? std::sqrt(s.second_moment)
                                               : s.stddev;
    if (!(d > 0.0))
        throw DegeneracyError("layer " + layer_name +
                              ": degenerate (zero) activation statistics");
    return d;
}

}  // namespace detail

/// The normalizer each layer's output carries in the merged network.
/// Weighted layers default to their own divisor; pass-through layers inherit;
/// joins impose their own divisor on every branch feeding them.
inline std::vector<double> assign_normalizers(
    const NetworkGraph& net, const std::vector<LayerStats>& stats,
    StatsMode mode = StatsMode::SecondMoment) {
    if (stats.size() != net.layers.size())
        throw std::invalid_argument("assign_normalizers: stats size mismatch");
    const std::size_t n = net.layers.size();
    std::vector<std::optional<double>> required(n);
    std::vector<double> norm(n, 0.0);

    // Backward sweep: joins pin their branches, pass-through layers forward
    // the pin to their producer.
    for (std::size_t idx = n; idx-- > 0;) {
        const Layer& l = net.layers[idx];
        auto impose = [&](int src, double value) {
            if (src < 0)
                throw std::runtime_error(
                    "layer " + l.name +
                    ": joins fed directly by the network input are unsupported");
            if (required[src] && *required[src] != value)
                throw std::runtime_error(
                    "layer " + net.layers[src].name +
                    ": feeds joins requiring incompatible normalizers");
            required[src] = value;
        };
        switch (l.kind) {
            case LayerKind::ResidualAdd:
            case LayerKind::Concat: {
                double v = required[idx]
                               ? *required[idx]
                               : detail::stats_divisor(stats[idx], mode, l.name);
                norm[idx] = v;
                for (int src : l.inputs) impose(src, v);
                break;
            }
            case LayerKind::Relu:
            case LayerKind::MaxPool:
            case LayerKind::AvgPool:
                if (required[idx]) impose(l.inputs[0], *required[idx]);
                break;
            case LayerKind::Conv:
            case LayerKind::FullyConnected:
                norm[idx] = required[idx] ? *required[idx]
                                          : detail::stats_divisor(stats[idx],
                                                                  mode, l.name);
                break;
            case LayerKind::BatchNorm:
                throw std::runtime_error("layer " + l.name +
                                         ": fold batchnorm before quantizing");
        }
    }
    // Forward sweep resolves pass-through inheritance.
    for (std::size_t idx = 0; idx < n; ++idx) {
        const Layer& l = net.layers[idx];
        if (l.kind == LayerKind::Relu || l.kind == LayerKind::MaxPool ||
            l.kind == LayerKind::AvgPool) {
            int src = l.inputs[0];
            norm[idx] = src < 0 ? 1.0 : norm[src];
            if (required[idx] && *required[idx] != norm[idx])
                throw std::runtime_error(
                    "layer " + l.name +
                    ": join constraint cannot reach a weighted layer");
        }
    }
    return norm;
}

/// Folds denormalization and normalization into conv/fc parameters (Eqs. on
/// file header). The first layer only normalizes its own output; the network
/// input is consumed unscaled.
inline NetworkGraph merge_normalization(
    const NetworkGraph& net, const std::vector<LayerStats>& stats,
    StatsMode mode = StatsMode::SecondMoment) {
    auto norm = assign_normalizers(net, stats, mode);
    NetworkGraph merged = net;
    for (std::size_t idx = 0; idx < merged.layers.size(); ++idx) {
        Layer& l = merged.layers[idx];
        if (!l.has_weights()) continue;
        int src = l.inputs[0];
        double in_norm = src < 0 ? 1.0 : norm[src];
        double wscale = in_norm / norm[idx];
        for (float& w : l.weights.data)
            w = static_cast<float>(w * wscale);
        for (float& b : l.bias.data)
            b = static_cast<float>(b / norm[idx]);
    }
    return merged;
}

// ---------------------------------------------------------------------------
// Scale search (per-tensor power-of-two exponent)
// ---------------------------------------------------------------------------

inline constexpr int kScaleSearchLo = -10;
inline constexpr int kScaleSearchHi = 10;  // exclusive

/// Mean squared error of quantizing `values` at scale exponent h_s,
/// measured after descaling back to the original range.
template <typename T>
double quantization_mse(const std::vector<T>& values, int h_s,
                        const MiniFloatFormat& fmt) {
    double s = 0.0;
    for (T v : values) {
        double x = static_cast<double>(v);
        double q = exact_to_double(
            dequantize_value(quantize_value(x, h_s, fmt), h_s, fmt));
        s += (x - q) * (x - q);
    }
    return s / static_cast<double>(values.size());
}

/// True when (mse_a, i_a) is a strictly better scale-search outcome than
/// (mse_b, i_b): lower MSE first, then the smaller scaling magnitude |i|,
/// then the negative exponent. Shared with the brute-force oracle so "equal
/// exactly" is well defined even on tied MSEs (an all-zero tensor, values
/// representable at several scales).
inline bool scale_candidate_better(double mse_a, int i_a, double mse_b,
                                   int i_b) {
    if (mse_a != mse_b) return mse_a < mse_b;
    if (std::abs(i_a) != std::abs(i_b)) return std::abs(i_a) < std::abs(i_b);
    return i_a < i_b;
}

/// argmin over h_s in [-10, 10) of the descaled MSE. An all-zero tensor
/// returns 0.
template <typename T>
int search_scale(const std::vector<T>& values, const MiniFloatFormat& fmt) {
    if (values.empty())
        throw std::invalid_argument("search_scale: empty tensor");
    bool all_zero = true;
    for (T v : values)
        if (v != T(0)) {
            all_zero = false;
            break;
        }
    if (all_zero) return 0;
    int best_i = 0;
    double best_mse = HUGE_VAL;
    bool first = true;
    for (int i = kScaleSearchLo; i < kScaleSearchHi; ++i) {
        double mse = quantization_mse(values, i, fmt);
        if (first || scale_candidate_better(mse, i, best_mse, best_i)) {
            best_mse = mse;
            best_i = i;
            first = false;
        }
    }
    return best_i;
}

// ---------------------------------------------------------------------------
// Quantized parameter containers
// ---------------------------------------------------------------------------

/// 8-bit codes plus format plus power-of-two scale exponent.
struct QuantizedTensor {
    std::vector<std::uint8_t> codes;
    std::vector<int> dims;
    MiniFloatFormat fmt;
    int h_s = 0;

    std::size_t size() const { return codes.size(); }
    Code8 code(std::size_t i) const { return Code8{codes[i]}; }
};

/// 16-bit two's-complement fixed-point biases with a shared binary point.
struct QuantizedBias {
    std::vector<std::int16_t> values;
    int frac_bits = 0;
};

inline std::int16_t quantize_bias_value(double v, int frac_bits) {
    double scaled = std::ldexp(v, frac_bits);
    if (!std::isfinite(scaled))
        throw std::domain_error("quantize_bias: non-finite value");
    // Saturate symmetrically at +/-(2^15 - 1); round half to even inside.
    if (scaled >= 32767.0) return 32767;
    if (scaled <= -32767.0) return -32767;
    double fl = std::floor(scaled);
    double frac = scaled - fl;
    double r = frac > 0.5 ? fl + 1.0 : fl;
    if (frac == 0.5) {
        auto lo = static_cast<std::int64_t>(fl);
        r = (lo % 2 == 0) ? fl : fl + 1.0;
    }
    return static_cast<std::int16_t>(r);
}

template <typename T>
QuantizedBias quantize_bias(const std::vector<T>& values, int frac_bits) {
    QuantizedBias out;
    out.frac_bits = frac_bits;
    out.values.reserve(values.size());
    for (T v : values)
        out.values.push_back(quantize_bias_value(static_cast<double>(v), frac_bits));
    return out;
}

inline double dequantize_bias_value(std::int16_t v, int frac_bits) {
    return std::ldexp(static_cast<double>(v), -frac_bits);
}

// ---------------------------------------------------------------------------
// Whole-network quantization
// ---------------------------------------------------------------------------

/// Per-layer quantized parameters (empty for layers without weights).
struct QuantizedLayerParams {
    int h_s_w = 0;
    int act_scale = 0;  // equals the network-wide h_s_act for every layer
    QuantizedTensor weights;
    QuantizedBias bias;
};

struct QuantizedNetwork {
    MiniFloatFormat fmt;
    int h_s_act = 0;
    StatsMode stats_mode = StatsMode::SecondMoment;
    NetworkGraph graph;  // topology only; fp32 parameters are stripped
    std::vector<QuantizedLayerParams> params;
};

/// Shared-scale invariant: every layer's activation scale equals h_s_act
/// (which also guarantees residual/concat branches agree).
inline bool activation_scales_consistent(const QuantizedNetwork& q) {
    for (const auto& p : q.params)
        if (p.act_scale != q.h_s_act) return false;
    return true;
}

/// Runs the full flow: merge normalization, per-tensor weight scale search,
/// one global activation scale from the pooled normalized calibration
/// activations, and 16-bit bias quantization at the accumulator alignment.
inline QuantizedNetwork quantize_network(const NetworkGraph& net,
                                         const std::vector<LayerStats>& stats,
                                         const std::vector<Tensor>& calib,
                                         const MiniFloatFormat& fmt,
                                         StatsMode mode = StatsMode::SecondMoment) {
    NetworkGraph merged = merge_normalization(net, stats, mode);

    // Pool the network input and every normalized layer output: they all
    // share one scale exponent.
    std::vector<float> pooled;
    for (const Tensor& img : calib) {
        pooled.insert(pooled.end(), img.data.begin(), img.data.end());
        for (const Tensor& act : infer_fp32(merged, img))
            pooled.insert(pooled.end(), act.data.begin(), act.data.end());
    }
    const int h_s_act = search_scale(pooled, fmt);

    QuantizedNetwork q;
    q.fmt = fmt;
    q.h_s_act = h_s_act;
    q.stats_mode = mode;
    q.graph = merged;
    q.params.resize(merged.layers.size());
    const int frac_bits = -product_unit_exponent(fmt);
    for (std::size_t idx = 0; idx < merged.layers.size(); ++idx) {
        Layer& l = q.graph.layers[idx];
        auto& p = q.params[idx];
        p.act_scale = h_s_act;
        if (!l.has_weights()) continue;
        p.h_s_w = search_scale(l.weights.data, fmt);
        p.weights.fmt = fmt;
        p.weights.h_s = p.h_s_w;
        p.weights.dims = l.weights.dims;
        p.weights.codes.reserve(l.weights.size());
        for (float w : l.weights.data)
            p.weights.codes.push_back(quantize_value(w, p.h_s_w, fmt).bits);
        // Biases are stored scale-free at the accumulator's fractional
        // alignment; the datapath shifts them into window units at run time.
        p.bias = quantize_bias(l.bias.data, frac_bits);
        l.weights = Tensor();  // strip fp32 payload; topology fields remain
        l.bias = Tensor();
    }
    return q;
}

}  // namespace phoenix
