#include "phoenix/minifloat.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace phoenix;

namespace {

Code8 code(int s, int m, int e, const MiniFloatFormat& f) {
    return make_code(s, m, e, f);
}

const MiniFloatFormat m4e3 = MiniFloatFormat::make(4, 3);
const MiniFloatFormat m7e0 = MiniFloatFormat::make(7, 0);

}  // namespace

TEST(Format, ConstructionAndParse) {
    for (int a = 0; a <= 7; ++a) {
        auto f = MiniFloatFormat::make(a, 7 - a);
        EXPECT_EQ(1 + f.mantissa_bits + f.exponent_bits, 8);
        if (f.exponent_bits >= 1)
            EXPECT_EQ(f.bias, (1 << (f.exponent_bits - 1)) - 1);
        else
            EXPECT_EQ(f.bias, 0);
    }
    EXPECT_EQ(MiniFloatFormat::parse("M4E3").bias, 3);
    EXPECT_EQ(MiniFloatFormat::parse("M0E7").bias, 63);
    EXPECT_THROW(MiniFloatFormat::parse("M4E4"), std::invalid_argument);
    EXPECT_THROW(MiniFloatFormat::parse("m4e3"), std::invalid_argument);
    EXPECT_THROW(MiniFloatFormat::parse("M8E?"), std::invalid_argument);
    EXPECT_EQ(MiniFloatFormat::make(5, 2).name(), "M5E2");
}

TEST(Decode, SpecValues) {
    EXPECT_EQ(decode_to_double(code(0, 0, 0, m4e3), m4e3), 0.0);
    EXPECT_EQ(decode_to_double(code(0, 8, 3, m4e3), m4e3), 1.5);
    EXPECT_EQ(decode_to_double(code(0, 15, 7, m4e3), m4e3), 31.0);
    EXPECT_EQ(decode_to_double(code(1, 1, 0, m4e3), m4e3), -0.015625);
    // b = 0 degenerates to sign-magnitude fixed point: M * 2^-7.
    EXPECT_EQ(decode_to_double(code(0, 64, 0, m7e0), m7e0), 0.5);
    EXPECT_EQ(decode_to_double(code(1, 127, 0, m7e0), m7e0), -127.0 / 128.0);
}

TEST(Decode, BitLayoutIsSignMantissaExponent) {
    // S=0, M=8, E=3 must be the byte 0b0_1000_011.
    EXPECT_EQ(code(0, 8, 3, m4e3).bits, 0b01000011);
    EXPECT_EQ(code(1, 1, 0, m4e3).bits, 0b10001000);
}

TEST(MaxValue, MatchesExhaustiveEnumeration) {
    for (const auto& f : all_formats()) {
        ExactValue best{};
        for (int b = 0; b < 256; ++b) {
            auto v = exact_abs(decode(Code8{static_cast<std::uint8_t>(b)}, f));
            if (exact_cmp(v, best) > 0) best = v;
        }
        EXPECT_TRUE(exact_eq(best, max_value(f))) << f.name();
    }
    EXPECT_EQ(exact_to_double(max_value(m4e3)), 31.0);
    EXPECT_EQ(exact_to_double(max_value(MiniFloatFormat::make(5, 2))), 7.875);
    EXPECT_EQ(exact_to_double(max_value(MiniFloatFormat::make(3, 4))), 480.0);
}

TEST(Encode, SpecValues) {
    EXPECT_EQ(encode(1.5, m4e3), code(0, 8, 3, m4e3));
    EXPECT_EQ(encode(100.0, m4e3), code(0, 15, 7, m4e3));  // saturates to +31
    EXPECT_EQ(encode(-100.0, m4e3), code(1, 15, 7, m4e3));
    EXPECT_EQ(encode(0.0, m4e3).bits, 0);
    EXPECT_EQ(encode(-0.0, m4e3).bits, 0);  // negative zero canonicalizes
    EXPECT_THROW(encode(std::numeric_limits<double>::infinity(), m4e3),
                 std::domain_error);
    EXPECT_THROW(encode(std::nan(""), m4e3), std::domain_error);
}

TEST(Encode, TiesGoToEvenMantissa) {
    // Neighbors 1.5 (M=8) and 1.5625 (M=9): midpoint keeps the even M.
    EXPECT_EQ(encode(1.53125, m4e3), code(0, 8, 3, m4e3));
    // Neighbors 1.5625 (M=9) and 1.625 (M=10): midpoint goes up to even.
    EXPECT_EQ(encode(1.59375, m4e3), code(0, 10, 3, m4e3));
    // Half the smallest subnormal ties down to zero.
    EXPECT_EQ(encode(0.0078125, m4e3).bits, 0);
    EXPECT_EQ(encode(0.0078126, m4e3), code(0, 1, 0, m4e3));
    // Binade boundary: between 1.1111*2^0 and 1.0000*2^1 the even side is M=0.
    EXPECT_EQ(encode(1.96875, m4e3), code(0, 0, 4, m4e3));
}

TEST(QuantizeValue, SpecValues) {
    EXPECT_EQ(quantize_value(0.75, 1, m4e3), code(0, 8, 3, m4e3));
    EXPECT_EQ(exact_to_double(dequantize_value(code(0, 8, 3, m4e3), 1, m4e3)),
              0.75);
    EXPECT_EQ(quantize_value(0.0, -7, m4e3).bits, 0);
    // 64 * 2^-1 = 32 saturates to +31; dequantized back it reads 62.
    auto c = quantize_value(64.0, -1, m4e3);
    EXPECT_EQ(c, code(0, 15, 7, m4e3));
    EXPECT_EQ(exact_to_double(dequantize_value(c, -1, m4e3)), 62.0);
}

TEST(Enumerate, CountSymmetryAndUniformGrid) {
    for (const auto& f : all_formats()) {
        auto vals = enumerate_values(f);
        ASSERT_EQ(vals.size(), 255u) << f.name();
        for (std::size_t i = 0; i + 1 < vals.size(); ++i)
            EXPECT_LT(exact_cmp(vals[i], vals[i + 1]), 0);
        for (std::size_t i = 0; i < vals.size(); ++i)
            EXPECT_TRUE(exact_eq(vals[i], exact_neg(vals[vals.size() - 1 - i])));
    }
    // M7E0 is an evenly spaced grid.
    auto vals = enumerate_values(m7e0);
    auto step = exact_sub(vals[1], vals[0]);
    EXPECT_EQ(exact_to_double(step), 1.0 / 128.0);
    for (std::size_t i = 0; i + 1 < vals.size(); ++i)
        EXPECT_TRUE(exact_eq(exact_sub(vals[i + 1], vals[i]), step));
}

TEST(Enumerate, GapRatioAcrossBinades) {
    // Largest over smallest positive gap: 2^(2^b - 2) whenever the format has
    // both mantissa and exponent bits. M0E7 has no intra-binade steps, so its
    // ratio drops one power of two.
    for (const auto& f : all_formats()) {
        if (f.exponent_bits == 0) continue;
        auto vals = enumerate_values(f);
        ExactValue smallest{}, largest{};
        for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
            auto gap = exact_sub(vals[i + 1], vals[i]);
            if (smallest.is_zero() || exact_cmp(gap, smallest) < 0) smallest = gap;
            if (exact_cmp(gap, largest) > 0) largest = gap;
        }
        int expected_pow = (1 << f.exponent_bits) - 2 - (f.mantissa_bits == 0 ? 1 : 0);
        EXPECT_TRUE(exact_eq(largest, exact_ldexp(smallest, expected_pow)))
            << f.name();
    }
}

TEST(RoundTrip, ExhaustiveAllFormats) {
    for (const auto& f : all_formats()) {
        for (int b = 0; b < 256; ++b) {
            Code8 c{static_cast<std::uint8_t>(b)};
            Code8 back = encode(decode(c, f), f);
            if (decode(c, f).is_zero())
                EXPECT_EQ(back.bits, 0) << f.name() << " byte " << b;
            else
                EXPECT_EQ(back, c) << f.name() << " byte " << b;
        }
    }
}

TEST(Encode, MatchesTableOracleOnRandomInputs) {
    testutil::Rng rng(7);
    for (const auto& f : all_formats()) {
        double top = exact_to_double(max_value(f));
        for (int i = 0; i < 2000; ++i) {
            double x = (testutil::uniform01(rng) * 2 - 1) * top * 1.25;
            auto got = encode(x, f);
            auto want = nearest_code_rational(exact_from_double(x), 1, f);
            EXPECT_EQ(got, want) << f.name() << " x=" << x;
        }
    }
}

TEST(Encode, ExhaustiveMidpointsAgainstTableOracle) {
    // Midpoints between neighbors are the hard cases; sweep them all plus
    // off-midpoint nudges for every format.
    for (const auto& f : all_formats()) {
        auto vals = enumerate_values(f);
        for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
            ExactValue mid = exact_ldexp(exact_add(vals[i], vals[i + 1]), -1);
            for (int nudge : {-1, 0, 1}) {
                ExactValue x = mid;
                if (nudge != 0 && !mid.is_zero())
                    x = exact_add(mid, exact_scaled(nudge, mid.exp2 - 8));
                auto got = encode(x, f);
                auto want = nearest_code_rational(x, 1, f);
                EXPECT_TRUE(exact_eq(decode(got, f), decode(want, f)))
                    << f.name() << " i=" << i << " nudge=" << nudge;
            }
        }
    }
}

TEST(Properties, Monotonicity) {
    testutil::Rng rng(11);
    for (const auto& f : all_formats()) {
        double top = exact_to_double(max_value(f));
        std::vector<double> xs;
        for (int i = 0; i < 4000; ++i)
            xs.push_back((testutil::uniform01(rng) * 2 - 1) * top * 1.1);
        std::sort(xs.begin(), xs.end());
        double prev = -HUGE_VAL;
        for (double x : xs) {
            double q = decode_to_double(encode(x, f), f);
            EXPECT_GE(q, prev) << f.name() << " x=" << x;
            prev = q;
        }
    }
}

TEST(Properties, HalfUlpBound) {
    testutil::Rng rng(13);
    for (const auto& f : all_formats()) {
        auto vals = enumerate_values(f);
        double top = exact_to_double(max_value(f));
        for (int i = 0; i < 3000; ++i) {
            double x = (testutil::uniform01(rng) * 2 - 1) * top;
            ExactValue ex = exact_from_double(x);
            ExactValue q = decode(encode(x, f), f);
            // Neighbors around x.
            std::size_t lo = 0, hi = vals.size() - 1;
            while (lo < hi) {
                std::size_t mid = (lo + hi) / 2;
                if (exact_cmp(vals[mid], ex) < 0) lo = mid + 1; else hi = mid;
            }
            ExactValue v_hi = vals[lo];
            ExactValue v_lo = lo > 0 ? vals[lo - 1] : vals[0];
            ExactValue gap = exact_sub(v_hi, v_lo);
            ExactValue err2 = exact_ldexp(exact_abs(exact_sub(ex, q)), 1);
            EXPECT_LE(exact_cmp(err2, gap), 0) << f.name() << " x=" << x;
        }
    }
}

TEST(Properties, SignSymmetry) {
    testutil::Rng rng(17);
    for (const auto& f : all_formats()) {
        double top = exact_to_double(max_value(f));
        for (int i = 0; i < 2000; ++i) {
            double x = (testutil::uniform01(rng) * 2 - 1) * top * 1.2;
            Code8 pos = encode(x, f);
            Code8 neg = encode(-x, f);
            if (decode(pos, f).is_zero())
                EXPECT_EQ(neg.bits, pos.bits);
            else
                EXPECT_EQ(neg.bits, pos.bits ^ 0x80);
        }
    }
}

TEST(ExactValue, ArithmeticBasics) {
    auto a = exact_from_double(1.5);
    auto b = exact_from_double(2.0);
    EXPECT_EQ(exact_to_double(exact_mul(a, b)), 3.0);
    EXPECT_EQ(exact_to_double(exact_add(a, b)), 3.5);
    EXPECT_EQ(exact_to_double(exact_sub(a, b)), -0.5);
    EXPECT_EQ(exact_cmp(a, b), -1);
    EXPECT_EQ(exact_cmp(b, a), 1);
    EXPECT_EQ(exact_cmp(a, exact_from_double(1.5)), 0);
    // Comparison stays exact across a huge exponent spread.
    EXPECT_EQ(exact_cmp(exact_scaled(1, 64), exact_scaled(1, -70)), 1);
    EXPECT_EQ(exact_cmp(exact_scaled(-1, 64), exact_scaled(1, -70)), -1);
    // 2^60 + 1 compares above 2^60.
    auto big = exact_add(exact_scaled(1, 60), exact_from_int(1));
    EXPECT_EQ(exact_cmp(big, exact_scaled(1, 60)), 1);
}
