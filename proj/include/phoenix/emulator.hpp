#pragma once
// Layer-level quantized inference on the PE datapath. Convolutions and
// fully-connected layers tile their reduction over 32-lane PE dot products
// and accumulate in the post-processing module; pooling, residual and concat
// operate directly on codes (all activations share one scale exponent, so a
// residual add is integer addition on a 16-bit aligned grid).

#include <cstdint>
#include <span>
#include <vector>

#include "phoenix/datapath.hpp"
#include "phoenix/netgraph.hpp"
#include "phoenix/quantizer.hpp"

namespace phoenix {

inline constexpr int kPeLanes = 32;  // Nm

inline QuantizedTensor quantize_tensor(const Tensor& t,
                                       const MiniFloatFormat& fmt, int h_s) {
    QuantizedTensor q;
    q.fmt = fmt;
    q.h_s = h_s;
    q.dims = t.dims;
    q.codes.reserve(t.size());
    for (float v : t.data) q.codes.push_back(quantize_value(v, h_s, fmt).bits);
    return q;
}

inline Tensor dequantize_tensor(const QuantizedTensor& q) {
    Tensor t(q.dims);
    for (std::size_t i = 0; i < q.codes.size(); ++i)
        t.data[i] = static_cast<float>(
            exact_to_double(dequantize_value(q.code(i), q.h_s, q.fmt)));
    return t;
}

namespace detail {

/// Decoded value as an integer on the format's finest activation grid
/// (2^act_grid_exponent units).
inline int act_grid_exponent(const MiniFloatFormat& f) {
    return f.min_pow() - f.mantissa_bits;
}

/// Decoded value brought onto the 16-bit grid 2^(act_grid_exponent + shift):
/// values beyond the window saturate, low bits under it round half to even.
inline std::int64_t code_to_fixed(Code8 c, const MiniFloatFormat& f,
                                  int shift = 0) {
    DecodedCode d = decode_fields(c, f);
    if (d.sig == 0) return 0;
    int sh = d.pow2 - act_grid_exponent(f) - shift;
    std::int64_t mag;
    if (sh >= 0)
        mag = bit_length(d.sig) + sh > 15
                  ? 32767
                  : static_cast<std::int64_t>(d.sig) << sh;
    else
        mag = static_cast<std::int64_t>(round_div_pow2_even(d.sig, -sh));
    return d.sign ? -mag : mag;
}

/// Grid shift placing the 16-bit operand window of the residual and pooling
/// paths at the working scale: activations are normalized and carry
/// 2^h_s_act, so the window top sits near 32x that magnitude. Zero (the
/// operands are bit-exact) for every format whose dynamic range already
/// fits, e.g. M4E3; sums run in a wider ALU and saturate back to 16 bits.
inline int fixed_window_shift(const MiniFloatFormat& f, int h_s_act) {
    return std::max(0, h_s_act + 5 - act_grid_exponent(f) - 15);
}

/// Container biases hold round(b * 2^frac_bits) of the normalized bias; the
/// accumulator wants b * 2^(h_s_act + h_s_w) in window units, i.e. the
/// stored integer shifted by (h_s_act + h_s_w) - window_offset.
inline std::int64_t bias_in_window_units(std::int16_t stored, int shift) {
    if (shift >= 0) return static_cast<std::int64_t>(stored) << shift;
    std::uint64_t mag = static_cast<std::uint64_t>(std::abs(stored));
    auto q = static_cast<std::int64_t>(round_div_pow2_even(mag, -shift));
    return stored < 0 ? -q : q;
}

inline double stored_weight_rms(const QuantizedTensor& w) {
    if (w.codes.empty()) return 0.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < w.codes.size(); ++i) {
        double v = exact_to_double(decode(w.code(i), w.fmt));
        ss += v * v;
    }
    return std::sqrt(ss / static_cast<double>(w.codes.size()));
}

}  // namespace detail

/// Runs one layer of a quantized network. `inputs` are the producer outputs
/// (network input first if referenced); all tensors carry the shared
/// activation scale. Sticky accumulator overflow is reported through
/// `overflow`.
inline QuantizedTensor execute_layer_quantized(
    const QuantizedNetwork& q, int layer_idx,
    std::span<const QuantizedTensor* const> inputs, int t, bool& overflow) {
    const Layer& l = q.graph.layers[layer_idx];
    const MiniFloatFormat& fmt = q.fmt;
    const auto& params = q.params[layer_idx];
    auto shapes = layer_shapes(q.graph);
    QuantizedTensor out;
    out.fmt = fmt;
    out.h_s = q.h_s_act;
    out.dims = shapes[layer_idx];
    out.codes.assign(Tensor::element_count(out.dims), 0);

    const QuantizedTensor& in = *inputs[0];
    switch (l.kind) {
        case LayerKind::Conv: {
            if (params.bias.frac_bits != -product_unit_exponent(fmt))
                throw std::invalid_argument(
                    "layer " + l.name + ": bias is not at accumulator alignment");
            const int oc_n = out.dims[0], oh = out.dims[1], ow = out.dims[2];
            const int ic_n = l.in_channels, k = l.kernel;
            const int ih = in.dims[1], iw = in.dims[2];
            const int tiles = (ic_n + kPeLanes - 1) / kPeLanes;
            const int out_shift = -params.h_s_w;
            const int window = layer_window_offset(
                q.h_s_act, detail::stored_weight_rms(params.weights), t, fmt);
            const int bias_shift = q.h_s_act + params.h_s_w - window;
            std::vector<Code8> lane_a(kPeLanes), lane_w(kPeLanes);
            for (int oc = 0; oc < oc_n; ++oc)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        AccumulatorState st;
                        std::optional<Code8> res;
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx)
                                for (int tile = 0; tile < tiles; ++tile) {
                                    const int iy = oy * l.stride + ky - l.pad;
                                    const int ix = ox * l.stride + kx - l.pad;
                                    const bool inside = iy >= 0 && iy < ih &&
                                                        ix >= 0 && ix < iw;
                                    for (int lane = 0; lane < kPeLanes; ++lane) {
                                        const int ic = tile * kPeLanes + lane;
                                        lane_a[lane] =
                                            (inside && ic < ic_n)
                                                ? Code8{in.codes[(static_cast<std::size_t>(ic) * ih + iy) * iw + ix]}
                                                : Code8{0};
                                        lane_w[lane] =
                                            ic < ic_n
                                                ? params.weights.code(((static_cast<std::size_t>(oc) * ic_n + ic) * k + ky) * k + kx)
                                                : Code8{0};
                                    }
                                    const bool last = ky == k - 1 &&
                                                      kx == k - 1 &&
                                                      tile == tiles - 1;
                                    res = ppm_step(
                                        pe_dot(lane_a, lane_w, fmt, t, window),
                                        st,
                                        detail::bias_in_window_units(
                                            params.bias.values[oc], bias_shift),
                                        last, Activation::None, out_shift, fmt,
                                        window);
                                }
                        overflow |= st.overflow;
                        out.codes[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = res->bits;
                    }
            break;
        }
        case LayerKind::FullyConnected: {
            if (params.bias.frac_bits != -product_unit_exponent(fmt))
                throw std::invalid_argument(
                    "layer " + l.name + ": bias is not at accumulator alignment");
            const int in_n = l.in_features;
            const int tiles = (in_n + kPeLanes - 1) / kPeLanes;
            const int out_shift = -params.h_s_w;
            const int window = layer_window_offset(
                q.h_s_act, detail::stored_weight_rms(params.weights), t, fmt);
            const int bias_shift = q.h_s_act + params.h_s_w - window;
            std::vector<Code8> lane_a(kPeLanes), lane_w(kPeLanes);
            for (int o = 0; o < l.out_features; ++o) {
                AccumulatorState st;
                std::optional<Code8> res;
                for (int tile = 0; tile < tiles; ++tile) {
                    for (int lane = 0; lane < kPeLanes; ++lane) {
                        const int i = tile * kPeLanes + lane;
                        lane_a[lane] = i < in_n ? Code8{in.codes[i]} : Code8{0};
                        lane_w[lane] =
                            i < in_n
                                ? params.weights.code(static_cast<std::size_t>(o) * in_n + i)
                                : Code8{0};
                    }
                    res = ppm_step(pe_dot(lane_a, lane_w, fmt, t, window), st,
                                   detail::bias_in_window_units(
                                       params.bias.values[o], bias_shift),
                                   tile == tiles - 1, Activation::None,
                                   out_shift, fmt, window);
                }
                overflow |= st.overflow;
                out.codes[o] = res->bits;
            }
            break;
        }
        case LayerKind::MaxPool: {
            const int c_n = out.dims[0], oh = out.dims[1], ow = out.dims[2];
            const int iw = in.dims[2];
            for (int c = 0; c < c_n; ++c)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        Code8 best{0};
                        bool first = true;
                        for (int ky = 0; ky < l.kernel; ++ky)
                            for (int kx = 0; kx < l.kernel; ++kx) {
                                Code8 c8{in.codes[(static_cast<std::size_t>(c) * in.dims[1] + oy * l.stride + ky) * iw + ox * l.stride + kx]};
                                if (first ||
                                    exact_cmp(decode(c8, fmt), decode(best, fmt)) > 0) {
                                    best = c8;
                                    first = false;
                                }
                            }
                        out.codes[(static_cast<std::size_t>(c) * oh + oy) * ow + ox] = best.bits;
                    }
            break;
        }
        case LayerKind::AvgPool: {
            const int c_n = out.dims[0], oh = out.dims[1], ow = out.dims[2];
            const std::int64_t window = static_cast<std::int64_t>(l.kernel) * l.kernel;
            // Operands live on the 16-bit activation grid; the K*K sum runs
            // wider. The shift is zero (fully exact) for narrow formats.
            const int shift = detail::fixed_window_shift(fmt, q.h_s_act);
            const int grid = detail::act_grid_exponent(fmt) + shift;
            for (int c = 0; c < c_n; ++c)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        std::int64_t sum = 0;
                        for (int ky = 0; ky < l.kernel; ++ky)
                            for (int kx = 0; kx < l.kernel; ++kx)
                                sum += detail::code_to_fixed(
                                    Code8{in.codes[(static_cast<std::size_t>(c) * in.dims[1] + oy * l.stride + ky) * in.dims[2] + ox * l.stride + kx]},
                                    fmt, shift);
                        // Exact division: nearest code to (sum * 2^grid) / K^2.
                        Code8 avg = nearest_code_rational(
                            exact_scaled(sum, grid), window, fmt);
                        out.codes[(static_cast<std::size_t>(c) * oh + oy) * ow + ox] = avg.bits;
                    }
            break;
        }
        case LayerKind::Relu:
            // Negative codes (including -0) clamp to the +0 byte.
            for (std::size_t i = 0; i < in.codes.size(); ++i) {
                Code8 c{in.codes[i]};
                out.codes[i] = c.sign(fmt) ? 0 : c.bits;
            }
            break;
        case LayerKind::ResidualAdd: {
            const QuantizedTensor& rhs = *inputs[1];
            if (in.h_s != rhs.h_s)
                throw std::invalid_argument(
                    "layer " + l.name + ": residual operands disagree on scale");
            // 16-bit aligned fixed-point add; exact (shift 0) for M4E3.
            const int shift = detail::fixed_window_shift(fmt, q.h_s_act);
            const int grid = detail::act_grid_exponent(fmt) + shift;
            for (std::size_t i = 0; i < in.codes.size(); ++i) {
                std::int64_t sum =
                    detail::code_to_fixed(Code8{in.codes[i]}, fmt, shift) +
                    detail::code_to_fixed(Code8{rhs.codes[i]}, fmt, shift);
                if (sum > 32767) sum = 32767;  // 16-bit add window
                if (sum < -32767) sum = -32767;
                out.codes[i] = encode(exact_scaled(sum, grid), fmt).bits;
            }
            break;
        }
        case LayerKind::Concat: {
            std::size_t off = 0;
            for (const QuantizedTensor* src : inputs) {
                if (src->h_s != out.h_s)
                    throw std::invalid_argument(
                        "layer " + l.name + ": concat operands disagree on scale");
                std::copy(src->codes.begin(), src->codes.end(),
                          out.codes.begin() + off);
                off += src->codes.size();
            }
            break;
        }
        case LayerKind::BatchNorm:
            throw std::invalid_argument("layer " + l.name +
                                        ": batchnorm must be folded before "
                                        "quantized execution");
    }
    return out;
}

/// Whole-network emulated inference.
struct EmulationResult {
    std::vector<QuantizedTensor> activations;  // per layer, shared h_s_act
    Tensor output;                             // dequantized final activations
    ErrorReport report;                        // vs. reference, when given
    bool accumulator_overflow = false;
};

/// Quantizes the input at the shared activation scale, runs every layer on
/// the datapath, and (when reference per-layer fp32 activations are given)
/// fills the deviation report.
inline EmulationResult infer_quantized(
    const QuantizedNetwork& q, const Tensor& input, int t,
    const std::vector<Tensor>* reference = nullptr) {
    if (input.dims != q.graph.input_shape)
        throw std::invalid_argument("infer_quantized: input shape mismatch");
    EmulationResult r;
    QuantizedTensor qin = quantize_tensor(input, q.fmt, q.h_s_act);
    r.activations.resize(q.graph.layers.size());
    for (std::size_t i = 0; i < q.graph.layers.size(); ++i) {
        std::vector<const QuantizedTensor*> srcs;
        for (int src : q.graph.layers[i].inputs)
            srcs.push_back(src < 0 ? &qin : &r.activations[src]);
        r.activations[i] = execute_layer_quantized(
            q, static_cast<int>(i), srcs, t, r.accumulator_overflow);
    }
    r.output = dequantize_tensor(r.activations.back());

    if (reference) {
        if (reference->size() != q.graph.layers.size())
            throw std::invalid_argument(
                "infer_quantized: reference layer count mismatch");
        r.report.accumulator_overflow = r.accumulator_overflow;
        for (std::size_t i = 0; i < r.activations.size(); ++i) {
            const Tensor deq = dequantize_tensor(r.activations[i]);
            const Tensor& ref = (*reference)[i];
            ErrorReport::LayerError e;
            e.name = q.graph.layers[i].name;
            e.relative_l2_pct = relative_l2_pct(deq.data, ref.data);
            e.max_abs = max_abs_diff(deq.data, ref.data);
            std::size_t changed = 0;
            for (std::size_t k = 0; k < ref.data.size(); ++k)
                if (quantize_value(ref.data[k], q.h_s_act, q.fmt).bits !=
                    r.activations[i].codes[k])
                    ++changed;
            e.changed_code_fraction =
                static_cast<double>(changed) /
                static_cast<double>(std::max<std::size_t>(1, ref.data.size()));
            r.report.layers.push_back(e);
        }
        r.report.total_relative_l2_pct = r.report.layers.back().relative_l2_pct;
        r.report.total_max_abs = r.report.layers.back().max_abs;
        r.report.total_changed_code_fraction =
            r.report.layers.back().changed_code_fraction;
    }
    return r;
}

}  // namespace phoenix
