#include "phoenix/model_io.hpp"

#include <gtest/gtest.h>

#include "phoenix/emulator.hpp"
#include "toy_nets.hpp"

using namespace phoenix;

namespace {

bool graphs_equal(const NetworkGraph& a, const NetworkGraph& b) {
    if (a.input_shape != b.input_shape || a.layers.size() != b.layers.size())
        return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const Layer &x = a.layers[i], &y = b.layers[i];
        if (x.kind != y.kind || x.name != y.name || x.inputs != y.inputs)
            return false;
        if (x.weights.data != y.weights.data || x.bias.data != y.bias.data)
            return false;
    }
    return true;
}

}  // namespace

TEST(ModelIo, Fp32RoundTrip) {
    for (std::uint64_t seed : {0ull, 3ull, 5ull, 6ull}) {
        auto tc = testutil::make_toy_net(seed);
        auto bytes = serialize_model(tc.net);
        auto back = parse_model(bytes);
        EXPECT_TRUE(graphs_equal(tc.net, back)) << "seed " << seed;
        // Serialization is deterministic byte for byte.
        EXPECT_EQ(bytes, serialize_model(back));
    }
}

TEST(ModelIo, TruncationNamesTheMissingSection) {
    auto tc = testutil::make_toy_net(1);
    auto bytes = serialize_model(tc.net);
    // Cut inside the weight payload: the blob read fails with an offset.
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + bytes.size() / 2);
    try {
        parse_model(cut);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
        EXPECT_GT(e.offset, 0u);
    }
    // Cut before the weights section tag: the section is named.
    io::Writer w;
    w.tag("PHNX");
    w.u16(1);
    try {
        parse_model(w.bytes);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("TOPO"), std::string::npos);
    }
    EXPECT_THROW(parse_model({'P', 'H', 'N', 'O'}), ParseError);
}

TEST(ModelIo, BatchNormFoldsOnLoad) {
    testutil::Rng rng(71);
    NetworkGraph net;
    net.input_shape = {2, 4, 4};
    Layer conv = Layer::conv(2, 3, 3, 1, 1);
    conv.weights.data = testutil::gaussian_vec_f(rng, conv.weights.size(), 0.4);
    conv.bias.data = testutil::gaussian_vec_f(rng, 3, 0.1);
    net.add(std::move(conv));
    Layer bn = Layer::batchnorm(3);
    for (int c = 0; c < 3; ++c) {
        bn.bn_gamma.data[c] = 1.2f;
        bn.bn_beta.data[c] = 0.1f * c;
        bn.bn_mean.data[c] = 0.2f;
        bn.bn_var.data[c] = 0.5f + 0.1f * c;
    }
    net.add(std::move(bn));
    net.add(Layer::relu());

    auto bytes = serialize_model(net);
    auto unfolded = parse_model(bytes, false);
    auto folded = parse_model(bytes);
    ASSERT_EQ(unfolded.layers.size(), 3u);
    ASSERT_EQ(folded.layers.size(), 2u);

    Tensor in({2, 4, 4});
    in.data = testutil::gaussian_vec_f(rng, in.size());
    auto ref = network_output(unfolded, in);
    auto got = network_output(folded, in);
    EXPECT_LT(relative_l2_pct(got.data, ref.data), 1e-4);
}

TEST(ModelIo, QmodelRoundTripIsByteIdentical) {
    for (std::uint64_t seed : {2ull, 5ull}) {
        auto tc = testutil::make_toy_net(seed);
        auto stats = collect_stats(tc.net, tc.calib, StatsMode::SecondMoment);
        auto q = quantize_network(tc.net, stats, tc.calib,
                                  MiniFloatFormat::make(4, 3));
        auto bytes = serialize_qmodel(q);
        auto back = parse_qmodel(bytes);
        EXPECT_EQ(bytes, serialize_qmodel(back)) << "seed " << seed;
        EXPECT_EQ(back.h_s_act, q.h_s_act);
        EXPECT_EQ(back.fmt.name(), q.fmt.name());
        for (std::size_t i = 0; i < q.params.size(); ++i) {
            EXPECT_EQ(back.params[i].h_s_w, q.params[i].h_s_w);
            EXPECT_EQ(back.params[i].weights.codes, q.params[i].weights.codes);
            EXPECT_EQ(back.params[i].bias.values, q.params[i].bias.values);
        }
    }
}

TEST(ModelIo, QuantizedInferenceSurvivesTheContainer) {
    auto tc = testutil::make_toy_net(3);
    auto stats = collect_stats(tc.net, tc.calib, StatsMode::SecondMoment);
    auto q = quantize_network(tc.net, stats, tc.calib,
                              MiniFloatFormat::make(4, 3));
    auto back = parse_qmodel(serialize_qmodel(q));
    auto a = infer_quantized(q, tc.probe, 14);
    auto b = infer_quantized(back, tc.probe, 14);
    EXPECT_EQ(a.activations.back().codes, b.activations.back().codes);
}

TEST(ModelIo, TensorRoundTripAndBatching) {
    Tensor t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i)
        t.data[i] = 0.25f * static_cast<float>(i) - 2.0f;
    auto back = parse_tensor(serialize_tensor(t));
    EXPECT_EQ(back.dims, t.dims);
    EXPECT_EQ(back.data, t.data);

    Tensor batch({2, 1, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    auto images = tensor_as_batch(batch);
    ASSERT_EQ(images.size(), 2u);
    EXPECT_EQ(images[0].data, (std::vector<float>{1, 2, 3, 4}));
    EXPECT_EQ(images[1].data, (std::vector<float>{5, 6, 7, 8}));
    EXPECT_THROW(tensor_as_batch(Tensor({4})), std::invalid_argument);
}
