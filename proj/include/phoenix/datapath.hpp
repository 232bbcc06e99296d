#pragma once
// Bit-exact model of one PE lane: 8-bit floating-point multiplier, the
// truncating module that aligns products onto a common fixed-point grid, the
// adder tree, and the post-processing module (accumulate, bias, ReLU,
// convert back to 8 bits).
//
// Multiplier (per MaEb operand pair):
//   sign      = Sx XOR Sy
//   product   = sig_x * sig_y          (a+1)-bit unsigned multiplier;
//                                      hidden bit 1 for normals, 0 for
//                                      subnormals
//   sum       = max(Ex,1) + max(Ey,1)  b-bit unsigned adder; the bias is not
//                                      subtracted here (same for all inputs,
//                                      handled at the end of the pipeline)
//
// The 2a+b+4 bit result travels in sign-product-sum order. Aligned onto the
// grid u = 2^(2 - 2*bias - 2a) the magnitude spans 2a + 2^(b+1) - 2 bits
// (22 for M4E3: 10-bit product, exponent sum 2..14), which is what the
// truncating module cuts to t bits by saturating the top.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "phoenix/minifloat.hpp"

namespace phoenix {

// ---------------------------------------------------------------------------
// Multiplier
// ---------------------------------------------------------------------------

/// Full-precision multiplier output in sign-product-sum order.
struct RawProduct {
    std::uint8_t sign = 0;        // 1 bit
    std::uint32_t mant_product = 0;  // 2(a+1) bits
    std::uint32_t exp_sum = 0;       // b+1 bits

    bool operator==(const RawProduct&) const = default;
};

inline int raw_product_bits(const MiniFloatFormat& f) {
    return 2 * f.mantissa_bits + f.exponent_bits + 4;
}

/// Smallest exponent sum a product can carry (max(E,1) per operand; zero
/// when the format has no exponent field).
inline int min_exp_sum(const MiniFloatFormat& f) {
    return f.exponent_bits == 0 ? 0 : 2;
}

inline RawProduct fp8_mul(Code8 x, Code8 y, const MiniFloatFormat& f) {
    RawProduct p;
    p.sign = static_cast<std::uint8_t>(x.sign(f) ^ y.sign(f));
    const int a = f.mantissa_bits;
    auto sig = [&](Code8 c) -> std::uint32_t {
        int hidden = (f.exponent_bits > 0 && c.exponent(f) > 0) ? 1 : 0;
        return static_cast<std::uint32_t>((hidden << a) + c.mantissa(f));
    };
    p.mant_product = sig(x) * sig(y);
    if (f.exponent_bits > 0)
        p.exp_sum = static_cast<std::uint32_t>(std::max(x.exponent(f), 1) +
                                               std::max(y.exponent(f), 1));
    return p;
}

/// Exact value a RawProduct stands for:
/// (-1)^sign * mant_product * 2^(exp_sum - 2*bias - 2a).
inline ExactValue product_value(const RawProduct& p, const MiniFloatFormat& f) {
    std::int64_t m = p.sign ? -static_cast<std::int64_t>(p.mant_product)
                            : static_cast<std::int64_t>(p.mant_product);
    int pow2 = static_cast<int>(p.exp_sum) - min_exp_sum(f) +
               product_unit_exponent(f);
    return exact_scaled(m, pow2);
}

/// Debug line in sign-product-sum field order, for golden-trace diffs.
inline std::string dump_raw_product(const RawProduct& p,
                                    const MiniFloatFormat& f) {
    auto bits = [](std::uint32_t v, int width) {
        std::string s(width, '0');
        for (int i = 0; i < width; ++i)
            if (v & (1u << (width - 1 - i))) s[i] = '1';
        return s;
    };
    return bits(p.sign, 1) + "|" +
           bits(p.mant_product, 2 * (f.mantissa_bits + 1)) + "|" +
           bits(p.exp_sum, f.exponent_bits + 1);
}

// ---------------------------------------------------------------------------
// Truncating module
// ---------------------------------------------------------------------------

/// Product aligned onto the common grid and cut to t bits:
/// |value| <= 2^t - 1, in units of u = 2^product_unit_exponent(fmt).
struct TruncatedValue {
    std::int64_t value = 0;
    int t = 0;
};

/// Aligns a product to the full-precision fixed-point grid and saturates the
/// magnitude at 2^t - 1. A nonzero window_offset discards that many low bits
/// instead (round half to even), trading precision at the bottom for head-
/// room at the top; the default keeps the window anchored at the LSB.
inline TruncatedValue align_truncate(const RawProduct& p, int t,
                                     const MiniFloatFormat& f,
                                     int window_offset = 0) {
    if (t < 7 || t > product_span_bits(f))
        throw std::invalid_argument("align_truncate: t out of range for " +
                                    f.name());
    if (t > 62)
        throw std::invalid_argument("align_truncate: t wider than the 64-bit "
                                    "carrier");
    if (window_offset < 0)
        throw std::invalid_argument("align_truncate: negative window offset");
    TruncatedValue out;
    out.t = t;
    if (p.mant_product == 0) return out;

    const int shift = static_cast<int>(p.exp_sum) - min_exp_sum(f);
    const int f_bits = detail::bit_length(p.mant_product) + shift;
    const std::int64_t limit = (std::int64_t(1) << t) - 1;
    std::int64_t mag;
    if (f_bits - window_offset > t) {
        mag = limit;  // would overflow the window: saturate
    } else if (shift >= window_offset) {
        // Window LSB sits at or below the product's lowest bit: exact.
        // f_bits - offset <= t <= 62 bounds the shift.
        mag = static_cast<std::int64_t>(p.mant_product)
              << (shift - window_offset);
    } else {
        // The product's low bits fall below the window: round half to even.
        mag = static_cast<std::int64_t>(detail::round_div_pow2_even(
            p.mant_product, window_offset - shift));
        if (mag > limit) mag = limit;  // rounding up across the ceiling
    }
    out.value = p.sign ? -mag : mag;
    return out;
}

// ---------------------------------------------------------------------------
// Adder tree
// ---------------------------------------------------------------------------

/// Exact sum of uniformly-scaled truncated values. With Nm lanes of t+1-bit
/// inputs the result needs t + 1 + ceil(log2 Nm) bits, so no overflow is
/// possible in the 64-bit carrier for any supported t.
inline std::int64_t adder_tree(std::span<const TruncatedValue> lanes) {
    std::int64_t sum = 0;
    for (const auto& v : lanes) sum += v.value;
    return sum;
}

// ---------------------------------------------------------------------------
// Post-processing module
// ---------------------------------------------------------------------------

/// Running 32-bit accumulator for one output pixel. Saturates instead of
/// wrapping and remembers that it did.
struct AccumulatorState {
    std::int32_t acc = 0;
    int pass_count = 0;
    bool overflow = false;
};

enum class Activation { None, Relu };

namespace detail {

inline std::int32_t saturating_add32(std::int32_t a, std::int64_t b,
                                     bool& overflow) {
    std::int64_t s = static_cast<std::int64_t>(a) + b;
    if (s > INT32_MAX) {
        overflow = true;
        return INT32_MAX;
    }
    if (s < INT32_MIN) {
        overflow = true;
        return INT32_MIN;
    }
    return static_cast<std::int32_t>(s);
}

}  // namespace detail

/// One PPM step: accumulate an adder-tree sum; on the last pass add the bias
/// (already in accumulator units), apply the activation, rescale by
/// 2^out_shift, and convert to a code. Intermediate passes return nothing.
/// window_offset names the truncating-module window the sums were produced
/// with, so the accumulator unit is u * 2^window_offset.
inline std::optional<Code8> ppm_step(std::int64_t sum, AccumulatorState& state,
                                     std::int64_t bias, bool last_pass,
                                     Activation act, int out_shift,
                                     const MiniFloatFormat& f,
                                     int window_offset = 0) {
    state.acc = detail::saturating_add32(state.acc, sum, state.overflow);
    ++state.pass_count;
    if (!last_pass) return std::nullopt;
    state.acc = detail::saturating_add32(state.acc, bias, state.overflow);
    if (act == Activation::Relu && state.acc < 0) state.acc = 0;
    ExactValue v = exact_scaled(
        state.acc, product_unit_exponent(f) + window_offset + out_shift);
    return encode(v, f);
}

/// Spills the accumulator to the 16-bit OFMB entry at unit u * 2^spill_shift
/// (round half to even, saturating), and the matching reload.
inline std::int16_t spill_to_ofmb(AccumulatorState& state, int spill_shift) {
    std::int64_t mag = std::llabs(static_cast<std::int64_t>(state.acc));
    std::uint64_t q = detail::round_div_pow2_even(
        static_cast<std::uint64_t>(mag), spill_shift);
    std::int64_t v = state.acc < 0 ? -static_cast<std::int64_t>(q)
                                   : static_cast<std::int64_t>(q);
    if (v > 32767) {
        state.overflow = true;
        v = 32767;
    }
    if (v < -32767) {
        state.overflow = true;
        v = -32767;
    }
    return static_cast<std::int16_t>(v);
}

inline void reload_from_ofmb(AccumulatorState& state, std::int16_t stored,
                             int spill_shift) {
    state.acc = static_cast<std::int32_t>(static_cast<std::int64_t>(stored)
                                          << spill_shift);
}

// ---------------------------------------------------------------------------
// PE dot product
// ---------------------------------------------------------------------------

/// Nm-lane dot product: multiply, truncate to t bits, sum. Result is in
/// accumulator units u * 2^window_offset.
inline std::int64_t pe_dot(std::span<const Code8> acts,
                           std::span<const Code8> weights,
                           const MiniFloatFormat& f, int t,
                           int window_offset = 0) {
    if (acts.size() != weights.size())
        throw std::invalid_argument("pe_dot: lane count mismatch");
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < acts.size(); ++i)
        sum += align_truncate(fp8_mul(acts[i], weights[i], f), t, f,
                              window_offset)
                   .value;
    return sum;
}

/// Truncating-module window position for a layer. Activations are normalized
/// (unit RMS) and scaled by 2^h_s_act, so per-lane products have RMS about
/// 2^h_s_act * rms(stored weights). The window anchor is fixed per layer
/// (the dot position does not move with t): it is raised just enough that
/// the ceiling at the t=14 operating point sits near 16x the product RMS,
/// so shrinking t pulls the saturation point into the distribution's tail
/// while the discarded LSBs stay ~2^10 below the working magnitude. Layers
/// whose products already sit low (natural-scale weights) keep the offset at
/// zero, the plain full-precision anchor. The span clamp restores bit-exact
/// behaviour whenever t covers the whole product range. The shift derives
/// from the stored weight codes, so a compiled schedule can carry it without
/// extra model fields.
inline int layer_window_offset(int h_s_act, double stored_weight_rms, int t,
                               const MiniFloatFormat& f) {
    int headroom = std::max(0, product_span_bits(f) - t);
    if (!(stored_weight_rms > 0.0)) return 0;
    int scale = h_s_act +
                static_cast<int>(std::llround(std::log2(stored_weight_rms)));
    // Ceiling at t=14: 2^(14 + offset + unit_exponent) = 2^(scale + 4).
    int offset = scale - 10 - product_unit_exponent(f);
    return std::clamp(offset, 0, headroom);
}

}  // namespace phoenix
