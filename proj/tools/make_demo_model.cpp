// Generates a small deterministic demo model plus calibration/input tensors
// so the CLI can be exercised without any external data:
//   <prefix>.phnx        fp32 model (conv/relu/conv with a residual block)
//   <prefix>.calib.phxt  rank-4 calibration batch
//   <prefix>.input.phxt  rank-3 probe image

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>

#include "phoenix/model_io.hpp"
#include "phoenix/netgraph.hpp"

using namespace phoenix;

namespace {

struct Rng {
    std::uint64_t s;
    explicit Rng(std::uint64_t seed) : s(seed * 0x9E3779B97F4A7C15ull + 1) {}
    std::uint64_t next() {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        return s;
    }
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double gaussian() {
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * M_PI * uniform());
    }
    void fill(Tensor& t, double sigma) {
        for (auto& v : t.data) v = static_cast<float>(sigma * gaussian());
    }
};

}  // namespace

int main(int argc, char** argv) {
    std::string prefix = argc > 1 ? argv[1] : "demo";
    std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 7;
    Rng rng(seed);

    NetworkGraph net;
    net.input_shape = {3, 8, 8};
    Layer c1 = Layer::conv(3, 8, 3, 1, 1);
    c1.name = "conv1";
    rng.fill(c1.weights, 1.0 / std::sqrt(27.0));
    rng.fill(c1.bias, 0.05);
    net.add(std::move(c1));
    int relu1 = net.add(Layer::relu());
    Layer c2 = Layer::conv(8, 8, 3, 1, 1);
    c2.name = "conv2";
    rng.fill(c2.weights, 1.0 / std::sqrt(72.0));
    rng.fill(c2.bias, 0.05);
    int conv2 = net.add(std::move(c2));
    net.add(Layer::residual_add(relu1, conv2));
    Layer c3 = Layer::conv(8, 4, 1);
    c3.name = "head";
    rng.fill(c3.weights, 1.0 / std::sqrt(8.0));
    rng.fill(c3.bias, 0.05);
    net.add(std::move(c3));

    save_model(net, prefix + ".phnx");

    Tensor calib({2, 3, 8, 8});
    rng.fill(calib, 1.0);
    save_tensor(calib, prefix + ".calib.phxt");

    Tensor input({3, 8, 8});
    rng.fill(input, 1.0);
    save_tensor(input, prefix + ".input.phxt");

    std::cout << "wrote " << prefix << ".phnx, " << prefix << ".calib.phxt, "
              << prefix << ".input.phxt\n";
    return 0;
}
