#include "phoenix/quantizer.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace phoenix;

namespace {

const MiniFloatFormat m4e3 = MiniFloatFormat::make(4, 3);

NetworkGraph two_layer_fc() {
    NetworkGraph net;
    net.input_shape = {2, 1, 1};
    Layer fc1 = Layer::fully_connected(2, 2);
    fc1.weights.data = {1, 1, 0, 1};
    net.add(std::move(fc1));
    Layer fc2 = Layer::fully_connected(2, 2);
    fc2.weights.data = {2, 0, 1, 1};
    net.add(std::move(fc2));
    return net;
}

/// Independent brute force over all 20 candidates, quantizing through the
/// table-based nearest-code route instead of the production encoder.
template <typename T>
int brute_force_scale(const std::vector<T>& values, const MiniFloatFormat& f) {
    int best_i = 0;
    double best = HUGE_VAL;
    bool first = true;
    for (int i = kScaleSearchLo; i < kScaleSearchHi; ++i) {
        double mse = 0.0;
        for (T v : values) {
            auto scaled = exact_ldexp(exact_from_double(static_cast<double>(v)), i);
            auto q = exact_to_double(
                exact_ldexp(decode(nearest_code_rational(scaled, 1, f), f), -i));
            mse += (static_cast<double>(v) - q) * (static_cast<double>(v) - q);
        }
        mse /= static_cast<double>(values.size());
        if (first || scale_candidate_better(mse, i, best, best_i)) {
            best = mse;
            best_i = i;
            first = false;
        }
    }
    return best_i;
}

}  // namespace

TEST(SecondMoment, SpecValues) {
    EXPECT_DOUBLE_EQ(second_moment({1, 1, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(second_moment({0, 0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(second_moment({1, 2, 3}), 14.0 / 3.0);
    EXPECT_THROW(second_moment({}), std::invalid_argument);
}

TEST(CollectStats, IdentityLayerSeesInputMoment) {
    NetworkGraph net;
    net.input_shape = {1, 2, 2};
    Layer conv = Layer::conv(1, 1, 1);
    conv.weights.data = {1.0f};
    net.add(std::move(conv));
    Tensor img({1, 2, 2}, {1, 2, 3, 4});
    auto stats = collect_stats(net, {img}, StatsMode::SecondMoment);
    EXPECT_DOUBLE_EQ(stats[0].second_moment, (1 + 4 + 9 + 16) / 4.0);
    EXPECT_EQ(stats[0].sample_count, 4);
    // Duplicating the image changes nothing but the sample count.
    auto stats2 = collect_stats(net, {img, img}, StatsMode::SecondMoment);
    EXPECT_DOUBLE_EQ(stats2[0].second_moment, stats[0].second_moment);
    EXPECT_EQ(stats2[0].sample_count, 8);
}

TEST(CollectStats, HandTracedTwoLayerNet) {
    auto net = two_layer_fc();
    auto stats = collect_stats(net, {Tensor({2, 1, 1}, {1, 2})},
                               StatsMode::SecondMoment);
    // fc1: [3, 2]; fc2: [6, 5].
    EXPECT_DOUBLE_EQ(stats[0].second_moment, (9 + 4) / 2.0);
    EXPECT_DOUBLE_EQ(stats[1].second_moment, (36 + 25) / 2.0);
}

TEST(CollectStats, MeanStdMode) {
    NetworkGraph net;
    net.input_shape = {1, 1, 4};
    Layer conv = Layer::conv(1, 1, 1);
    conv.weights.data = {1.0f};
    net.add(std::move(conv));
    auto stats = collect_stats(net, {Tensor({1, 1, 4}, {1, 2, 3, 4})},
                               StatsMode::MeanStd);
    EXPECT_TRUE(stats[0].has_mean_std);
    EXPECT_DOUBLE_EQ(stats[0].mean, 2.5);
    EXPECT_NEAR(stats[0].stddev, std::sqrt(1.25), 1e-12);
}

TEST(Merge, UnitStatsAreANoOp) {
    auto net = two_layer_fc();
    std::vector<LayerStats> stats(2);
    stats[0].second_moment = 1.0;
    stats[1].second_moment = 1.0;
    auto merged = merge_normalization(net, stats);
    EXPECT_EQ(merged.layers[0].weights.data, net.layers[0].weights.data);
    EXPECT_EQ(merged.layers[1].weights.data, net.layers[1].weights.data);
}

TEST(Merge, SingleLayerHalvesAtMomentFour) {
    NetworkGraph net;
    net.input_shape = {2, 1, 1};
    Layer fc = Layer::fully_connected(2, 1);
    fc.weights.data = {2, 4};
    fc.bias.data = {1};
    net.add(std::move(fc));
    std::vector<LayerStats> stats(1);
    stats[0].second_moment = 4.0;
    auto merged = merge_normalization(net, stats);
    EXPECT_EQ(merged.layers[0].weights.data, (std::vector<float>{1, 2}));
    EXPECT_EQ(merged.layers[0].bias.data, (std::vector<float>{0.5}));
}

TEST(Merge, TwoLayerOutputsEqualNormalizedOriginal) {
    testutil::Rng rng(41);
    NetworkGraph net;
    net.input_shape = {2, 4, 4};
    Layer c1 = Layer::conv(2, 3, 3, 1, 1);
    c1.weights.data = testutil::gaussian_vec_f(rng, c1.weights.size(), 0.5);
    c1.bias.data = testutil::gaussian_vec_f(rng, 3, 0.1);
    net.add(std::move(c1));
    net.add(Layer::relu());
    Layer c2 = Layer::conv(3, 2, 3, 1, 1);
    c2.weights.data = testutil::gaussian_vec_f(rng, c2.weights.size(), 0.5);
    c2.bias.data = testutil::gaussian_vec_f(rng, 2, 0.1);
    net.add(std::move(c2));

    Tensor img({2, 4, 4});
    img.data = testutil::gaussian_vec_f(rng, img.size());
    auto stats = collect_stats(net, {img}, StatsMode::SecondMoment);
    auto merged = merge_normalization(net, stats);
    auto norms = assign_normalizers(net, stats);

    auto ref = infer_fp32(net, img);
    auto got = infer_fp32(merged, img);
    for (std::size_t m = 0; m < ref.size(); ++m) {
        std::vector<float> normalized(ref[m].data);
        for (float& v : normalized) v = static_cast<float>(v / norms[m]);
        EXPECT_LT(relative_l2_pct(got[m].data, normalized), 1e-4)
            << "layer " << m;
    }
}

TEST(Merge, MeanStdModeDividesBySigma) {
    testutil::Rng rng(53);
    NetworkGraph net;
    net.input_shape = {2, 4, 4};
    Layer c1 = Layer::conv(2, 3, 3, 1, 1);
    c1.weights.data = testutil::gaussian_vec_f(rng, c1.weights.size(), 0.5);
    c1.bias.data = testutil::gaussian_vec_f(rng, 3, 0.3);
    net.add(std::move(c1));
    Layer c2 = Layer::conv(3, 2, 1);
    c2.weights.data = testutil::gaussian_vec_f(rng, c2.weights.size(), 0.6);
    net.add(std::move(c2));

    Tensor img({2, 4, 4});
    img.data = testutil::gaussian_vec_f(rng, img.size());
    auto stats = collect_stats(net, {img}, StatsMode::MeanStd);
    auto merged = merge_normalization(net, stats, StatsMode::MeanStd);
    auto got = infer_fp32(merged, img);
    auto ref = infer_fp32(net, img);
    // The divisor is sigma rather than the RMS; the mean stays unfolded.
    for (int m = 0; m < 2; ++m) {
        std::vector<float> normalized = ref[m].data;
        for (float& v : normalized)
            v = static_cast<float>(v / stats[m].stddev);
        EXPECT_LT(relative_l2_pct(got[m].data, normalized), 1e-4) << m;
    }
}

TEST(Merge, ZeroMomentIsAnError) {
    auto net = two_layer_fc();
    std::vector<LayerStats> stats(2);
    stats[0].second_moment = 0.0;
    stats[1].second_moment = 1.0;
    EXPECT_THROW(merge_normalization(net, stats), std::runtime_error);
}

TEST(Merge, JoinBranchesShareTheJoinNormalizer) {
    NetworkGraph net;
    net.input_shape = {2, 4, 4};
    int c1 = net.add(Layer::conv(2, 2, 3, 1, 1));
    int c2 = net.add(Layer::conv(2, 2, 3, 1, 1));
    int res = net.add(Layer::residual_add(c1, c2));
    (void)res;
    std::vector<LayerStats> stats(3);
    stats[0].second_moment = 4.0;
    stats[1].second_moment = 9.0;
    stats[2].second_moment = 16.0;
    auto norms = assign_normalizers(net, stats);
    EXPECT_DOUBLE_EQ(norms[c1], 4.0);  // pinned to sqrt(16), not sqrt(4)
    EXPECT_DOUBLE_EQ(norms[c2], 4.0);
    EXPECT_DOUBLE_EQ(norms[res], 4.0);
}

TEST(SearchScale, SpecValues) {
    EXPECT_EQ(search_scale(std::vector<float>{0, 0, 0}, m4e3), 0);
    EXPECT_EQ(search_scale(std::vector<float>{31.0f}, m4e3), 0);
}

TEST(SearchScale, MatchesBruteForceOnGaussians) {
    testutil::Rng rng(43);
    for (int trial = 0; trial < 4; ++trial) {
        auto values = testutil::gaussian_vec(rng, 10000);
        EXPECT_EQ(search_scale(values, m4e3), brute_force_scale(values, m4e3));
    }
    // Skewed scales too.
    for (double sigma : {0.01, 0.37, 42.0}) {
        auto values = testutil::gaussian_vec(rng, 3000, sigma);
        EXPECT_EQ(search_scale(values, m4e3), brute_force_scale(values, m4e3))
            << "sigma " << sigma;
    }
}

TEST(QuantizeBias, SpecValues) {
    EXPECT_EQ(quantize_bias_value(0.0, 12), 0);
    EXPECT_EQ(quantize_bias_value(1.5, 12), 6144);
    EXPECT_EQ(quantize_bias_value(10.0, 12), 32767);  // 40960 saturates
    EXPECT_EQ(quantize_bias_value(-10.0, 12), -32767);
    // Round half to even at the fixed point grid.
    EXPECT_EQ(quantize_bias_value(2.5, 0), 2);
    EXPECT_EQ(quantize_bias_value(3.5, 0), 4);
    auto qb = quantize_bias(std::vector<double>{0.0, 1.5}, 12);
    EXPECT_EQ(qb.values, (std::vector<std::int16_t>{0, 6144}));
    EXPECT_DOUBLE_EQ(dequantize_bias_value(6144, 12), 1.5);
}

TEST(QuantizeNetwork, StructureAndScales) {
    testutil::Rng rng(47);
    auto net = two_layer_fc();
    for (auto& l : net.layers) {
        l.weights.data = testutil::gaussian_vec_f(rng, l.weights.size(), 0.7);
        l.bias.data = testutil::gaussian_vec_f(rng, l.bias.size(), 0.1);
    }
    Tensor img({2, 1, 1});
    img.data = testutil::gaussian_vec_f(rng, 2);
    auto stats = collect_stats(net, {img}, StatsMode::SecondMoment);
    auto q = quantize_network(net, stats, {img}, m4e3);

    EXPECT_TRUE(activation_scales_consistent(q));
    ASSERT_EQ(q.params.size(), 2u);
    // With unit stats forced, weight scales must equal the standalone search.
    std::vector<LayerStats> unit(2);
    unit[0].second_moment = 1.0;
    unit[1].second_moment = 1.0;
    auto q_unit = quantize_network(net, unit, {img}, m4e3);
    for (int m = 0; m < 2; ++m) {
        EXPECT_EQ(q_unit.params[m].h_s_w,
                  search_scale(net.layers[m].weights.data, m4e3));
        EXPECT_EQ(q_unit.params[m].bias.frac_bits, 12);
    }
    // fp32 payloads are stripped from the quantized topology.
    EXPECT_TRUE(q.graph.layers[0].weights.data.empty());
}
