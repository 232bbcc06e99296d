#pragma once
// 8-bit floating-point (MaEb) formats and exact arithmetic on their values.
//
// A format M<a>E<b> spends one byte as  sign | mantissa | exponent,
// most-significant bit first:
//
//   bit:    7    6 ... b     b-1 ... 0
//          [S]  [M, a bits]  [E, b bits]        with 1 + a + b = 8
//
// Decoding follows the IEEE-754 convention without Inf/NaN: every byte
// pattern is a finite value, and encoding saturates out-of-range inputs to
// the largest representable magnitude.
//
//   E > 0:  (-1)^S * (1 + M/2^a) * 2^(E - bias)     bias = 2^(b-1) - 1
//   E = 0:  (-1)^S * (M/2^a)     * 2^(1 - bias)     (subnormal)
//   b = 0:  (-1)^S * M * 2^-a                       (plain sign-magnitude
//                                                     fixed point, bias 0)
//
// All value math here is exact (scaled integers), so tests can compare
// bit-for-bit instead of within an epsilon.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace phoenix {

// ---------------------------------------------------------------------------
// ExactValue: sign * mantissa * 2^exp2 with no rounding anywhere.
// ---------------------------------------------------------------------------

/// Exact dyadic rational. Mantissa is kept normalized (odd or zero) so a
/// value has one unique representation; all operations either stay exact or
/// throw std::overflow_error.
struct ExactValue {
    std::int64_t mant = 0;  // normalized: odd, or 0 (then exp2 == 0)
    std::int32_t exp2 = 0;

    constexpr bool is_zero() const { return mant == 0; }
    constexpr bool negative() const { return mant < 0; }
};

namespace detail {

inline int bit_length(unsigned __int128 v) {
    int n = 0;
    while (v) {
        ++n;
        v >>= 1;
    }
    return n;
}

inline ExactValue normalize(__int128 mant, std::int64_t exp2) {
    if (mant == 0) return ExactValue{0, 0};
    while ((mant & 1) == 0) {
        mant >>= 1;
        ++exp2;
    }
    unsigned __int128 mag = mant < 0 ? static_cast<unsigned __int128>(-mant)
                                     : static_cast<unsigned __int128>(mant);
    if (bit_length(mag) > 63)
        throw std::overflow_error("ExactValue: mantissa exceeds 63 bits");
    if (exp2 > INT32_MAX || exp2 < INT32_MIN)
        throw std::overflow_error("ExactValue: exponent out of range");
    return ExactValue{static_cast<std::int64_t>(mant),
                      static_cast<std::int32_t>(exp2)};
}

/// Round m / 2^k to the nearest integer, ties to even. m >= 0, k >= 0.
inline std::uint64_t round_div_pow2_even(std::uint64_t m, int k) {
    if (k <= 0) return m;
    if (k >= 64) return 0;  // m < 2^63 < 2^(k-1) guarantees the half test fails
    std::uint64_t q = m >> k;
    std::uint64_t rem = m & ((std::uint64_t(1) << k) - 1);
    std::uint64_t half = std::uint64_t(1) << (k - 1);
    if (rem > half || (rem == half && (q & 1))) ++q;
    return q;
}

}  // namespace detail

inline ExactValue exact_from_int(std::int64_t v) { return detail::normalize(v, 0); }

inline ExactValue exact_scaled(std::int64_t mant, int exp2) {
    return detail::normalize(mant, exp2);
}

/// Exact conversion from a finite double (the 53-bit significand is lossless).
inline ExactValue exact_from_double(double x) {
    if (!std::isfinite(x)) throw std::domain_error("non-finite value");
    if (x == 0.0) return ExactValue{};
    int e = 0;
    double m = std::frexp(x, &e);          // x = m * 2^e, |m| in [0.5, 1)
    auto scaled = static_cast<std::int64_t>(std::ldexp(m, 53));  // exact
    return detail::normalize(scaled, static_cast<std::int64_t>(e) - 53);
}

inline double exact_to_double(const ExactValue& v) {
    return std::ldexp(static_cast<double>(v.mant), v.exp2);
}

inline ExactValue exact_neg(const ExactValue& v) { return ExactValue{-v.mant, v.mant ? v.exp2 : 0}; }

inline ExactValue exact_mul(const ExactValue& a, const ExactValue& b) {
    return detail::normalize(static_cast<__int128>(a.mant) * b.mant,
                             static_cast<std::int64_t>(a.exp2) + b.exp2);
}

/// Exact scale by 2^k.
inline ExactValue exact_ldexp(const ExactValue& v, int k) {
    if (v.is_zero()) return v;
    return detail::normalize(v.mant, static_cast<std::int64_t>(v.exp2) + k);
}

inline ExactValue exact_add(const ExactValue& a, const ExactValue& b) {
    if (a.is_zero()) return b;
    if (b.is_zero()) return a;
    std::int64_t e = std::min(a.exp2, b.exp2);
    std::int64_t sa = a.exp2 - e, sb = b.exp2 - e;
    if (sa > 100 || sb > 100)
        throw std::overflow_error("ExactValue: addition alignment too wide");
    __int128 sum = (static_cast<__int128>(a.mant) << sa) +
                   (static_cast<__int128>(b.mant) << sb);
    return detail::normalize(sum, e);
}

inline ExactValue exact_sub(const ExactValue& a, const ExactValue& b) {
    return exact_add(a, exact_neg(b));
}

/// Three-way compare, exact for any exponent spread.
inline int exact_cmp(const ExactValue& a, const ExactValue& b) {
    int sa = a.is_zero() ? 0 : (a.negative() ? -1 : 1);
    int sb = b.is_zero() ? 0 : (b.negative() ? -1 : 1);
    if (sa != sb) return sa < sb ? -1 : 1;
    if (sa == 0) return 0;
    // Same nonzero sign: compare magnitudes by MSB position first so huge
    // exponent gaps never need aligned subtraction.
    auto mag_a = static_cast<std::uint64_t>(std::llabs(a.mant));
    auto mag_b = static_cast<std::uint64_t>(std::llabs(b.mant));
    std::int64_t msb_a = a.exp2 + detail::bit_length(mag_a);
    std::int64_t msb_b = b.exp2 + detail::bit_length(mag_b);
    if (msb_a != msb_b) return (msb_a < msb_b) == (sa > 0) ? -1 : 1;
    std::int64_t e = std::min(a.exp2, b.exp2);
    unsigned __int128 ua = static_cast<unsigned __int128>(mag_a) << (a.exp2 - e);
    unsigned __int128 ub = static_cast<unsigned __int128>(mag_b) << (b.exp2 - e);
    if (ua == ub) return 0;
    return (ua < ub) == (sa > 0) ? -1 : 1;
}

inline bool exact_eq(const ExactValue& a, const ExactValue& b) {
    return a.mant == b.mant && a.exp2 == b.exp2;
}

inline ExactValue exact_abs(const ExactValue& v) {
    return v.negative() ? exact_neg(v) : v;
}

// ---------------------------------------------------------------------------
// Formats and codes
// ---------------------------------------------------------------------------

/// An MaEb format descriptor: a mantissa bits, b exponent bits, a + b = 7.
struct MiniFloatFormat {
    int mantissa_bits = 4;  // a
    int exponent_bits = 3;  // b
    int bias = 3;           // 2^(b-1) - 1, or 0 when b == 0

    static MiniFloatFormat make(int a, int b) {
        if (a < 0 || b < 0 || a + b != 7)
            throw std::invalid_argument("MaEb format requires a + b = 7");
        return MiniFloatFormat{a, b, b >= 1 ? (1 << (b - 1)) - 1 : 0};
    }

    /// Parses strict "MaEb" (e.g. "M4E3"); digits must sum to 7.
    static MiniFloatFormat parse(std::string_view s) {
        if (s.size() != 4 || s[0] != 'M' || s[2] != 'E' || s[1] < '0' ||
            s[1] > '7' || s[3] < '0' || s[3] > '7')
            throw std::invalid_argument("bad format string, expected MaEb");
        return make(s[1] - '0', s[3] - '0');
    }

    std::string name() const {
        return "M" + std::to_string(mantissa_bits) + "E" +
               std::to_string(exponent_bits);
    }

    int exp_max() const { return (1 << exponent_bits) - 1; }
    /// Power of two of the subnormal binade (value grid unit is 2^(this - a)).
    int min_pow() const { return exponent_bits == 0 ? 0 : 1 - bias; }

    bool operator==(const MiniFloatFormat& o) const {
        return mantissa_bits == o.mantissa_bits &&
               exponent_bits == o.exponent_bits;
    }
};

/// All eight constructible formats, M0E7 through M7E0.
inline std::vector<MiniFloatFormat> all_formats() {
    std::vector<MiniFloatFormat> v;
    for (int a = 0; a <= 7; ++a) v.push_back(MiniFloatFormat::make(a, 7 - a));
    return v;
}

/// One encoded byte. Field extraction needs the format (the byte itself does
/// not know its a/b split).
struct Code8 {
    std::uint8_t bits = 0;

    bool operator==(const Code8& o) const { return bits == o.bits; }

    int sign(const MiniFloatFormat&) const { return bits >> 7; }
    int mantissa(const MiniFloatFormat& f) const {
        return (bits >> f.exponent_bits) & ((1 << f.mantissa_bits) - 1);
    }
    int exponent(const MiniFloatFormat& f) const {
        return bits & ((1 << f.exponent_bits) - 1);
    }
};

inline Code8 make_code(int sign, int mantissa, int exponent,
                       const MiniFloatFormat& f) {
    return Code8{static_cast<std::uint8_t>((sign << 7) |
                                           (mantissa << f.exponent_bits) |
                                           exponent)};
}

/// Unpacked code fields with the decode rule already applied:
/// value = (-1)^sign * sig * 2^pow2, sig integer (hidden bit included).
struct DecodedCode {
    int sign = 0;
    std::uint32_t sig = 0;
    int pow2 = 0;
};

inline DecodedCode decode_fields(Code8 c, const MiniFloatFormat& f) {
    DecodedCode d;
    d.sign = c.sign(f);
    int m = c.mantissa(f);
    int e = c.exponent(f);
    if (f.exponent_bits == 0) {
        d.sig = static_cast<std::uint32_t>(m);
        d.pow2 = -f.mantissa_bits;
    } else if (e > 0) {
        d.sig = static_cast<std::uint32_t>((1 << f.mantissa_bits) + m);
        d.pow2 = e - f.bias - f.mantissa_bits;
    } else {
        d.sig = static_cast<std::uint32_t>(m);
        d.pow2 = 1 - f.bias - f.mantissa_bits;
    }
    return d;
}

/// Exact decoded value of a code. Every byte pattern is valid.
inline ExactValue decode(Code8 c, const MiniFloatFormat& f) {
    DecodedCode d = decode_fields(c, f);
    std::int64_t m = d.sign ? -static_cast<std::int64_t>(d.sig)
                            : static_cast<std::int64_t>(d.sig);
    return exact_scaled(m, d.pow2);
}

/// Largest representable magnitude of the format.
inline ExactValue max_value(const MiniFloatFormat& f) {
    int a = f.mantissa_bits;
    if (f.exponent_bits == 0) return exact_scaled((1 << a) - 1, -a);
    return exact_scaled((1 << (a + 1)) - 1, f.exp_max() - f.bias - a);
}

/// Products of two codes land on the grid u = 2^(this value): the exponent
/// sum bottoms out at 2 (max(E,1) per operand) minus 2*bias, and each
/// significand carries a bits of fraction. 2^-12 for M4E3; 2^-2a when b = 0.
inline int product_unit_exponent(const MiniFloatFormat& f) {
    return (f.exponent_bits == 0 ? 0 : 2) - 2 * f.bias - 2 * f.mantissa_bits;
}

/// Bits needed for the largest aligned product magnitude, 2a + 2^(b+1) - 2
/// (22 for M4E3: a 10-bit significand product shifted by up to 12).
inline int product_span_bits(const MiniFloatFormat& f) {
    return 2 * f.mantissa_bits + (1 << (f.exponent_bits + 1)) - 2;
}

// ---------------------------------------------------------------------------
// Encoding (round to nearest, ties to even mantissa, saturating)
// ---------------------------------------------------------------------------

/// Nearest-code encoding of an exact value. |x| >= max saturates to the max
/// code with x's sign; a zero result is always the +0 byte.
inline Code8 encode(const ExactValue& x, const MiniFloatFormat& f) {
    if (x.is_zero()) return Code8{0};
    const int a = f.mantissa_bits;
    const int sign = x.negative() ? 1 : 0;
    const ExactValue mag = exact_abs(x);

    if (exact_cmp(mag, max_value(f)) >= 0)
        return make_code(sign, (1 << a) - 1, f.exp_max(), f);

    const auto umag = static_cast<std::uint64_t>(mag.mant);
    // Integer grid position helper: round mag / 2^grid_pow to nearest-even.
    auto round_units = [&](int grid_pow) -> std::uint64_t {
        int shift = mag.exp2 - grid_pow;
        if (shift >= 0) {
            if (shift > 62) throw std::overflow_error("encode: shift overflow");
            return umag << shift;
        }
        return detail::round_div_pow2_even(umag, -shift);
    };

    if (f.exponent_bits == 0) {
        // Uniform grid of step 2^-a; |x| < max so rounding stays in range.
        auto units = round_units(-a);
        if (units == 0) return Code8{0};
        return make_code(sign, static_cast<int>(units), 0, f);
    }

    const ExactValue min_normal = exact_scaled(1, 1 - f.bias);
    if (exact_cmp(mag, min_normal) < 0) {
        // Subnormal range: grid step 2^(1 - bias - a).
        auto units = round_units(1 - f.bias - a);
        if (units == 0) return Code8{0};
        if (units == (std::uint64_t(1) << a)) return make_code(sign, 0, 1, f);
        return make_code(sign, static_cast<int>(units), 0, f);
    }

    // Normal range: locate the binade, then round the (a+1)-bit significand.
    int msb = mag.exp2 + detail::bit_length(umag) - 1;  // 2^msb <= mag < 2^(msb+1)
    int e = msb + f.bias;
    auto sig = round_units(msb - a);  // in [2^a, 2^(a+1)]
    if (sig == (std::uint64_t(2) << a)) {
        sig >>= 1;
        ++e;  // e <= exp_max since mag < max_value
    }
    return make_code(sign, static_cast<int>(sig) - (1 << a), e, f);
}

inline Code8 encode(double x, const MiniFloatFormat& f) {
    return encode(exact_from_double(x), f);
}

/// Exact double view of a decoded code (all formats fit a double exactly).
inline double decode_to_double(Code8 c, const MiniFloatFormat& f) {
    return exact_to_double(decode(c, f));
}

// ---------------------------------------------------------------------------
// Scaled quantization (Eq. 9 bookkeeping): stored value = x * 2^h_s
// ---------------------------------------------------------------------------

inline Code8 quantize_value(double x, int h_s, const MiniFloatFormat& f) {
    return encode(exact_ldexp(exact_from_double(x), h_s), f);
}

inline ExactValue dequantize_value(Code8 c, int h_s, const MiniFloatFormat& f) {
    return exact_ldexp(decode(c, f), -h_s);
}

// ---------------------------------------------------------------------------
// Enumeration
// ---------------------------------------------------------------------------

/// All distinct representable values in ascending order (+0/-0 collapse to a
/// single zero, so every format yields 255 entries).
inline std::vector<ExactValue> enumerate_values(const MiniFloatFormat& f) {
    std::vector<ExactValue> pos;
    for (int p = 1; p < 128; ++p)
        pos.push_back(decode(Code8{static_cast<std::uint8_t>(p)}, f));
    std::sort(pos.begin(), pos.end(),
              [](const ExactValue& a, const ExactValue& b) {
                  return exact_cmp(a, b) < 0;
              });
    std::vector<ExactValue> out;
    out.reserve(2 * pos.size() + 1);
    for (auto it = pos.rbegin(); it != pos.rend(); ++it) out.push_back(exact_neg(*it));
    out.push_back(ExactValue{});
    for (const auto& v : pos) out.push_back(v);
    return out;
}

/// Nonnegative magnitudes 0..max of a format in ascending order with their
/// codes, built once per format.
inline const std::vector<std::pair<ExactValue, Code8>>& positive_value_table(
    const MiniFloatFormat& f) {
    static const auto tables = [] {
        std::vector<std::vector<std::pair<ExactValue, Code8>>> all(8);
        for (int a = 0; a <= 7; ++a) {
            auto fmt = MiniFloatFormat::make(a, 7 - a);
            auto& table = all[a];
            for (int p = 0; p < 128; ++p) {
                Code8 c{static_cast<std::uint8_t>(p)};
                table.emplace_back(decode(c, fmt), c);
            }
            std::sort(table.begin(), table.end(),
                      [](const auto& x, const auto& y) {
                          return exact_cmp(x.first, y.first) < 0;
                      });
        }
        return all;
    }();
    return tables[f.mantissa_bits];
}

/// Nearest code to the rational num/den (den > 0), ties to even mantissa.
/// Table-driven, independent of the bit-math path in encode(); also the
/// exact-division route used by average pooling.
inline Code8 nearest_code_rational(const ExactValue& num, std::int64_t den,
                                   const MiniFloatFormat& f) {
    if (den <= 0) throw std::invalid_argument("nearest_code_rational: den <= 0");
    if (num.is_zero()) return Code8{0};
    int sign = num.negative() ? 1 : 0;
    ExactValue mag = exact_abs(num);
    ExactValue dv = exact_from_int(den);
    const auto& table = positive_value_table(f);

    if (exact_cmp(mag, exact_mul(table.back().first, dv)) >= 0)
        return make_code(sign, table.back().second.mantissa(f),
                         table.back().second.exponent(f), f);

    // First entry with value * den >= mag.
    std::size_t lo = 0, hi = table.size() - 1;
    while (lo < hi) {
        std::size_t mid = (lo + hi) / 2;
        if (exact_cmp(exact_mul(table[mid].first, dv), mag) < 0)
            lo = mid + 1;
        else
            hi = mid;
    }
    auto pick = [&](std::size_t idx) {
        return idx == 0 && table[idx].second.bits == 0
                   ? Code8{0}
                   : make_code(sign, table[idx].second.mantissa(f),
                               table[idx].second.exponent(f), f);
    };
    if (lo == 0) return pick(0);
    // Nearest of the two neighbors, decided against their midpoint so the
    // comparison never needs a wide aligned subtraction:
    //   2 * mag  vs  (v_lo + v_hi) * den.
    int cmp = exact_cmp(
        exact_ldexp(mag, 1),
        exact_mul(exact_add(table[lo - 1].first, table[lo].first), dv));
    if (cmp < 0) return pick(lo - 1);
    if (cmp > 0) return pick(lo);
    // Tie: half-to-even on the significand integer, which reduces to "even
    // mantissa field wins" whenever the format has mantissa bits.
    return (decode_fields(table[lo - 1].second, f).sig & 1) == 0 ? pick(lo - 1)
                                                                 : pick(lo);
}

}  // namespace phoenix
