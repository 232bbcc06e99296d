#pragma once
// Binary model containers, bit-exact across platforms (everything is
// explicitly little-endian).
//
// fp32 container ("PHNX"):
//   magic "PHNX" | u16 version=1
//   "TOPO" | u32 layer_count | u32 C,H,W | layer records
//   "WGTS" | per conv/fc: u64 n, f32[n] weights, u64 m, f32[m] bias
//            per batchnorm: u64 c, f32[c] gamma, beta, mean, var
//   "ENDM"
//
// Quantized container ("PHXQ"):
//   magic "PHXQ" | u16 version=1 | u8 len + format string | i32 h_s_act |
//   u8 stats_mode
//   "TOPO" (same layer records, no payloads follow in WGTS form)
//   "QWTS" | per conv/fc: i32 h_s_w, i32 act_scale, u64 n, u8[n] codes,
//            u64 m, i16[m] biases, i32 frac_bits
//   "ENDM"
//
// Tensor file ("PHXT"): u8 rank | u32 dims[rank] | f32 data. Rank 4 means a
// batch of rank-3 images.
//
// Parse failures throw ParseError carrying the byte offset and what was
// expected, so a truncated file names the section it is missing.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "phoenix/netgraph.hpp"
#include "phoenix/quantizer.hpp"

namespace phoenix {

struct ParseError : std::runtime_error {
    std::size_t offset;
    ParseError(const std::string& what, std::size_t off)
        : std::runtime_error(what + " (at byte offset " + std::to_string(off) +
                             ")"),
          offset(off) {}
};

namespace io {

struct Writer {
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        u8(static_cast<std::uint8_t>(v));
        u8(static_cast<std::uint8_t>(v >> 8));
    }
    void u32(std::uint32_t v) {
        u16(static_cast<std::uint16_t>(v));
        u16(static_cast<std::uint16_t>(v >> 16));
    }
    void u64(std::uint64_t v) {
        u32(static_cast<std::uint32_t>(v));
        u32(static_cast<std::uint32_t>(v >> 32));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void tag(const char (&t)[5]) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(t[i]));
    }
    void str(const std::string& s) {
        u8(static_cast<std::uint8_t>(s.size()));
        for (char c : s) u8(static_cast<std::uint8_t>(c));
    }
};

struct Reader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (pos + n > size)
            throw ParseError(std::string("truncated file: expected ") + what,
                             pos);
    }
    std::uint8_t u8(const char* what = "byte") {
        need(1, what);
        return data[pos++];
    }
    std::uint16_t u16(const char* what = "u16") {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(data[pos]) |
                          static_cast<std::uint16_t>(data[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what = "u32") {
        std::uint32_t lo = u16(what);
        return lo | static_cast<std::uint32_t>(u16(what)) << 16;
    }
    std::uint64_t u64(const char* what = "u64") {
        std::uint64_t lo = u32(what);
        return lo | static_cast<std::uint64_t>(u32(what)) << 32;
    }
    std::int32_t i32(const char* what = "i32") {
        return static_cast<std::int32_t>(u32(what));
    }
    std::int16_t i16(const char* what = "i16") {
        return static_cast<std::int16_t>(u16(what));
    }
    float f32(const char* what = "f32") {
        return std::bit_cast<float>(u32(what));
    }
    void expect_tag(const char (&t)[5]) {
        std::size_t at = pos;
        need(4, t);
        for (int i = 0; i < 4; ++i)
            if (data[pos + i] != static_cast<std::uint8_t>(t[i]))
                throw ParseError(std::string("missing section ") + t, at);
        pos += 4;
    }
    std::string str(const char* what = "string") {
        std::uint8_t n = u8(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

inline void write_file(const std::string& path,
                       const std::vector<std::uint8_t>& bytes) {
    // Atomic: write to a sibling temp file, then rename over the target.
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for write");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot open " + path);
    auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(size));
    if (!in) throw std::runtime_error("short read from " + path);
    return bytes;
}

inline void write_layer_record(Writer& w, const Layer& l) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.inputs.size()));
    for (int src : l.inputs) w.i32(src);
    switch (l.kind) {
        case LayerKind::Conv:
            w.u32(static_cast<std::uint32_t>(l.in_channels));
            w.u32(static_cast<std::uint32_t>(l.out_channels));
            w.u32(static_cast<std::uint32_t>(l.kernel));
            w.u32(static_cast<std::uint32_t>(l.stride));
            w.u32(static_cast<std::uint32_t>(l.pad));
            break;
        case LayerKind::FullyConnected:
            w.u32(static_cast<std::uint32_t>(l.in_features));
            w.u32(static_cast<std::uint32_t>(l.out_features));
            break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
            w.u32(static_cast<std::uint32_t>(l.kernel));
            w.u32(static_cast<std::uint32_t>(l.stride));
            break;
        case LayerKind::BatchNorm:
            w.f32(l.bn_eps);
            break;
        default:
            break;
    }
}

inline Layer read_layer_record(Reader& r) {
    auto kind_at = r.pos;
    auto kind_raw = r.u8("layer kind");
    if (kind_raw > static_cast<std::uint8_t>(LayerKind::BatchNorm))
        throw ParseError("unknown layer kind " + std::to_string(kind_raw),
                         kind_at);
    Layer l;
    l.kind = static_cast<LayerKind>(kind_raw);
    l.name = r.str("layer name");
    auto n_inputs = r.u8("input count");
    l.inputs.clear();
    for (int i = 0; i < n_inputs; ++i) l.inputs.push_back(r.i32("input id"));
    switch (l.kind) {
        case LayerKind::Conv:
            l.in_channels = static_cast<int>(r.u32("conv fields"));
            l.out_channels = static_cast<int>(r.u32("conv fields"));
            l.kernel = static_cast<int>(r.u32("conv fields"));
            l.stride = static_cast<int>(r.u32("conv fields"));
            l.pad = static_cast<int>(r.u32("conv fields"));
            break;
        case LayerKind::FullyConnected:
            l.in_features = static_cast<int>(r.u32("fc fields"));
            l.out_features = static_cast<int>(r.u32("fc fields"));
            break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
            l.kernel = static_cast<int>(r.u32("pool fields"));
            l.stride = static_cast<int>(r.u32("pool fields"));
            break;
        case LayerKind::BatchNorm:
            l.bn_eps = r.f32("batchnorm eps");
            break;
        default:
            break;
    }
    return l;
}

inline void write_f32_blob(Writer& w, const std::vector<float>& v) {
    w.u64(v.size());
    for (float x : v) w.f32(x);
}

inline std::vector<float> read_f32_blob(Reader& r, const char* what) {
    auto n = r.u64(what);
    std::vector<float> v(n);
    for (auto& x : v) x = r.f32(what);
    return v;
}

}  // namespace io

// ---------------------------------------------------------------------------
// fp32 model container
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_model(const NetworkGraph& net) {
    io::Writer w;
    w.tag("PHNX");
    w.u16(1);
    w.tag("TOPO");
    w.u32(static_cast<std::uint32_t>(net.layers.size()));
    for (int d : net.input_shape) w.u32(static_cast<std::uint32_t>(d));
    for (const Layer& l : net.layers) io::write_layer_record(w, l);
    w.tag("WGTS");
    for (const Layer& l : net.layers) {
        if (l.has_weights()) {
            io::write_f32_blob(w, l.weights.data);
            io::write_f32_blob(w, l.bias.data);
        } else if (l.kind == LayerKind::BatchNorm) {
            w.u64(l.bn_gamma.size());
            for (float v : l.bn_gamma.data) w.f32(v);
            for (float v : l.bn_beta.data) w.f32(v);
            for (float v : l.bn_mean.data) w.f32(v);
            for (float v : l.bn_var.data) w.f32(v);
        }
    }
    w.tag("ENDM");
    return w.bytes;
}

inline void save_model(const NetworkGraph& net, const std::string& path) {
    io::write_file(path, serialize_model(net));
}

/// Loads an fp32 container. BatchNorm records are folded into the preceding
/// convolution, so the returned graph is quantization-ready; pass
/// fold = false to keep them (reference/testing only).
inline NetworkGraph parse_model(const std::vector<std::uint8_t>& bytes,
                                bool fold = true) {
    io::Reader r{bytes.data(), bytes.size()};
    r.expect_tag("PHNX");
    auto version = r.u16("version");
    if (version != 1)
        throw ParseError("unsupported fp32 container version " +
                             std::to_string(version),
                         r.pos - 2);
    r.expect_tag("TOPO");
    NetworkGraph net;
    auto layer_count = r.u32("layer count");
    net.input_shape = {static_cast<int>(r.u32("input shape")),
                       static_cast<int>(r.u32("input shape")),
                       static_cast<int>(r.u32("input shape"))};
    net.layers.reserve(layer_count);
    for (std::uint32_t i = 0; i < layer_count; ++i)
        net.layers.push_back(io::read_layer_record(r));
    r.expect_tag("WGTS");
    auto shapes = layer_shapes(net);  // validates topology before payloads
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        Layer& l = net.layers[i];
        if (l.has_weights()) {
            std::size_t at = r.pos;
            auto wdims = l.kind == LayerKind::Conv
                             ? std::vector<int>{l.out_channels, l.in_channels,
                                                l.kernel, l.kernel}
                             : std::vector<int>{l.out_features, l.in_features};
            auto wdata = io::read_f32_blob(r, "weight blob");
            if (wdata.size() != Tensor::element_count(wdims))
                throw ParseError("layer " + l.name + ": weight count mismatch",
                                 at);
            l.weights = Tensor(wdims, std::move(wdata));
            at = r.pos;
            auto bdata = io::read_f32_blob(r, "bias blob");
            auto expect = l.kind == LayerKind::Conv
                              ? static_cast<std::size_t>(l.out_channels)
                              : static_cast<std::size_t>(l.out_features);
            if (bdata.size() != expect)
                throw ParseError("layer " + l.name + ": bias count mismatch",
                                 at);
            l.bias = Tensor({static_cast<int>(expect)}, std::move(bdata));
        } else if (l.kind == LayerKind::BatchNorm) {
            std::size_t at = r.pos;
            auto c = r.u64("batchnorm channel count");
            int channels = shapes[i][0];
            if (c != static_cast<std::uint64_t>(channels))
                throw ParseError("layer " + l.name +
                                     ": batchnorm channel mismatch",
                                 at);
            auto read_vec = [&](const char* what) {
                std::vector<float> v(c);
                for (auto& x : v) x = r.f32(what);
                return Tensor({channels}, std::move(v));
            };
            l.bn_gamma = read_vec("batchnorm gamma");
            l.bn_beta = read_vec("batchnorm beta");
            l.bn_mean = read_vec("batchnorm mean");
            l.bn_var = read_vec("batchnorm var");
        }
    }
    r.expect_tag("ENDM");
    return fold ? fold_batchnorm(net) : net;
}

inline NetworkGraph load_model(const std::string& path, bool fold = true) {
    return parse_model(io::read_file(path), fold);
}

// ---------------------------------------------------------------------------
// Quantized model container
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_qmodel(const QuantizedNetwork& q) {
    io::Writer w;
    w.tag("PHXQ");
    w.u16(1);
    w.str(q.fmt.name());
    w.i32(q.h_s_act);
    w.u8(q.stats_mode == StatsMode::SecondMoment ? 0 : 1);
    w.tag("TOPO");
    w.u32(static_cast<std::uint32_t>(q.graph.layers.size()));
    for (int d : q.graph.input_shape) w.u32(static_cast<std::uint32_t>(d));
    for (const Layer& l : q.graph.layers) io::write_layer_record(w, l);
    w.tag("QWTS");
    for (std::size_t i = 0; i < q.graph.layers.size(); ++i) {
        if (!q.graph.layers[i].has_weights()) continue;
        const auto& p = q.params[i];
        w.i32(p.h_s_w);
        w.i32(p.act_scale);
        w.u64(p.weights.codes.size());
        for (std::uint8_t c : p.weights.codes) w.u8(c);
        w.u64(p.bias.values.size());
        for (std::int16_t b : p.bias.values) w.i16(b);
        w.i32(p.bias.frac_bits);
    }
    w.tag("ENDM");
    return w.bytes;
}

inline void save_qmodel(const QuantizedNetwork& q, const std::string& path) {
    io::write_file(path, serialize_qmodel(q));
}

inline QuantizedNetwork parse_qmodel(const std::vector<std::uint8_t>& bytes) {
    io::Reader r{bytes.data(), bytes.size()};
    r.expect_tag("PHXQ");
    auto version = r.u16("version");
    if (version != 1)
        throw ParseError("unsupported qmodel container version " +
                             std::to_string(version),
                         r.pos - 2);
    QuantizedNetwork q;
    q.fmt = MiniFloatFormat::parse(r.str("format string"));
    q.h_s_act = r.i32("h_s_act");
    q.stats_mode = r.u8("stats mode") == 0 ? StatsMode::SecondMoment
                                           : StatsMode::MeanStd;
    r.expect_tag("TOPO");
    auto layer_count = r.u32("layer count");
    q.graph.input_shape = {static_cast<int>(r.u32("input shape")),
                           static_cast<int>(r.u32("input shape")),
                           static_cast<int>(r.u32("input shape"))};
    for (std::uint32_t i = 0; i < layer_count; ++i)
        q.graph.layers.push_back(io::read_layer_record(r));
    layer_shapes(q.graph);
    r.expect_tag("QWTS");
    q.params.resize(layer_count);
    for (std::size_t i = 0; i < q.graph.layers.size(); ++i) {
        Layer& l = q.graph.layers[i];
        auto& p = q.params[i];
        p.act_scale = q.h_s_act;
        if (!l.has_weights()) continue;
        p.h_s_w = r.i32("h_s_w");
        p.act_scale = r.i32("act_scale");
        std::size_t at = r.pos;
        auto n = r.u64("code count");
        p.weights.fmt = q.fmt;
        p.weights.h_s = p.h_s_w;
        p.weights.dims =
            l.kind == LayerKind::Conv
                ? std::vector<int>{l.out_channels, l.in_channels, l.kernel,
                                   l.kernel}
                : std::vector<int>{l.out_features, l.in_features};
        if (n != Tensor::element_count(p.weights.dims))
            throw ParseError("layer " + l.name + ": code count mismatch", at);
        p.weights.codes.resize(n);
        r.need(n, "weight codes");
        std::memcpy(p.weights.codes.data(), r.data + r.pos, n);
        r.pos += n;
        auto m = r.u64("bias count");
        p.bias.values.resize(m);
        for (auto& b : p.bias.values) b = r.i16("bias value");
        p.bias.frac_bits = r.i32("bias frac_bits");
    }
    r.expect_tag("ENDM");
    return q;
}

inline QuantizedNetwork load_qmodel(const std::string& path) {
    return parse_qmodel(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize_tensor(const Tensor& t) {
    io::Writer w;
    w.tag("PHXT");
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (int d : t.dims) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) w.f32(v);
    return w.bytes;
}

inline void save_tensor(const Tensor& t, const std::string& path) {
    io::write_file(path, serialize_tensor(t));
}

inline Tensor parse_tensor(const std::vector<std::uint8_t>& bytes) {
    io::Reader r{bytes.data(), bytes.size()};
    r.expect_tag("PHXT");
    auto rank = r.u8("tensor rank");
    std::vector<int> dims(rank);
    for (auto& d : dims) d = static_cast<int>(r.u32("tensor dims"));
    Tensor t(dims);
    for (auto& v : t.data) v = r.f32("tensor data");
    if (r.pos != r.size)
        throw ParseError("trailing bytes after tensor data", r.pos);
    return t;
}

inline Tensor load_tensor(const std::string& path) {
    return parse_tensor(io::read_file(path));
}

/// Splits a rank-4 tensor into a batch of rank-3 images (rank 3 is a batch
/// of one).
inline std::vector<Tensor> tensor_as_batch(const Tensor& t) {
    if (t.dims.size() == 3) return {t};
    if (t.dims.size() != 4)
        throw std::invalid_argument("expected a rank-3 or rank-4 tensor, got " +
                                    shape_str(t.dims));
    std::vector<Tensor> batch;
    std::vector<int> dims{t.dims[1], t.dims[2], t.dims[3]};
    std::size_t per = Tensor::element_count(dims);
    for (int i = 0; i < t.dims[0]; ++i) {
        Tensor img(dims);
        std::copy(t.data.begin() + i * per, t.data.begin() + (i + 1) * per,
                  img.data.begin());
        batch.push_back(std::move(img));
    }
    return batch;
}

}  // namespace phoenix
