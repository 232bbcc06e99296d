#pragma once
// Cycle-level model of the PE array, on-chip buffers and DMA.
//
// Geometry: Nm multipliers per PE, Ng PEs per group computing neighbouring
// output pixels of the same feature map (shared weights), Np groups working
// on different output channels (shared activations). One cycle therefore
// retires up to Nm * Ng * Np MACs. A conv layer costs
//
//   ceil(OC/Np) * ceil(OH*OW/Ng) * ceil(IC/Nm) * K*K      cycles
//
// with the first convolution flattened "according to the kernel size":
// ceil(IC*K*K/Nm) channel passes and no separate K*K factor, which is what
// makes 3-channel RGB stems efficient. Fully-connected layers are 1x1
// convolutions on a 1x1 image.
//
// All three buffers are ping-pong halves: a tile's loads and stores overlap
// the previous tile's compute, so per-pass time is max(compute, dma) and a
// pass stalls only when its bytes outrun the bandwidth. Pipeline fill/drain
// and instruction decode are modelled as zero; absolute numbers are only
// meaningful as ratios.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "phoenix/netgraph.hpp"

namespace phoenix {

struct PerfConfig {
    int nm = 32;
    int ng = 4;
    int np = 16;
    std::int64_t ifmb_bytes = 64 * 1024;
    std::int64_t ofmb_bytes = 64 * 1024;
    std::int64_t wb_bytes = 32 * 1024;
    double dma_bandwidth = 16.0;  // bytes per cycle
    double clock_hz = 1e9;

    std::int64_t macs_per_cycle() const {
        return static_cast<std::int64_t>(nm) * ng * np;
    }
};

/// Named configurations. "default" is the shipped design point;
/// "eyeriss-iso" is the iso-area comparison setup (768 MACs, 51.5KB WB).
inline PerfConfig perf_preset(const std::string& name) {
    if (name == "default") return PerfConfig{};
    if (name == "eyeriss-iso") {
        PerfConfig c;
        c.np = 6;
        c.wb_bytes = static_cast<std::int64_t>(51.5 * 1024);
        c.ifmb_bytes = 64 * 1024;
        c.ofmb_bytes = 64 * 1024;
        return c;
    }
    throw std::invalid_argument("unknown perf preset: " + name);
}

/// Peak MAC throughput in MAC/s: Nm * Ng * Np * clock.
inline double peak_throughput(const PerfConfig& cfg) {
    return static_cast<double>(cfg.macs_per_cycle()) * cfg.clock_hz;
}

// ---------------------------------------------------------------------------
// Block-level schedule
// ---------------------------------------------------------------------------

struct ScheduleRecord {
    enum class Kind { LoadIfm, LoadW, ComputeTile, StoreOfm };
    Kind kind = Kind::ComputeTile;
    int layer = 0;
    int pass = 0;  // compute pass the record's DMA overlaps with
    std::int64_t bytes = 0;
    std::int64_t compute_cycles = 0;  // ComputeTile only
    // Tile coordinates, half-open ranges.
    int oc0 = 0, oc1 = 0;  // output channels (LoadW/Compute/Store)
    int px0 = 0, px1 = 0;  // output pixels in raster order (Compute/Store)
    int ic0 = 0, ic1 = 0;  // input channels (LoadIfm/LoadW)
    int row0 = 0, row1 = 0;  // input rows (LoadIfm)
};

inline const char* record_kind_name(ScheduleRecord::Kind k) {
    switch (k) {
        case ScheduleRecord::Kind::LoadIfm: return "load_ifm";
        case ScheduleRecord::Kind::LoadW: return "load_w";
        case ScheduleRecord::Kind::ComputeTile: return "compute_tile";
        case ScheduleRecord::Kind::StoreOfm: return "store_ofm";
    }
    return "?";
}

/// Per-layer cycle and traffic report.
struct LayerPerf {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    std::int64_t compute_cycles = 0;
    std::int64_t dma_cycles = 0;    // serialized DMA time, sum over passes
    std::int64_t stall_cycles = 0;  // DMA time not hidden under compute
    std::int64_t total_cycles = 0;
    double utilization_pct = 0.0;
    std::int64_t macs = 0;
    std::int64_t bytes_in = 0;
    std::int64_t bytes_w = 0;
    std::int64_t bytes_out = 0;
    double min_bandwidth = 0.0;  // bytes/cycle to stay compute-bound
    std::string warning;         // set for pass-through layers
};

struct NetworkPerf {
    std::vector<LayerPerf> layers;
    std::int64_t total_cycles = 0;
    std::int64_t total_macs = 0;
    std::int64_t bytes_in = 0, bytes_w = 0, bytes_out = 0;
    double min_bandwidth = 0.0;  // max over layers
    double utilization_pct = 0.0;
    double seconds = 0.0;
};

namespace detail {

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) {
    return (a + b - 1) / b;
}

struct ConvGeometry {
    int ic, ih, iw, oc, oh, ow, k, stride, pad;
    bool flattened;  // first conv: channels and taps fold into one pass set

    std::int64_t out_pixels() const {
        return static_cast<std::int64_t>(oh) * ow;
    }
    std::int64_t macs() const {
        return static_cast<std::int64_t>(oc) * out_pixels() * ic * k * k;
    }
    /// Channel passes per output pixel group (incl. kernel taps).
    std::int64_t channel_passes(const PerfConfig& cfg) const {
        if (flattened)
            return ceil_div(static_cast<std::int64_t>(ic) * k * k, cfg.nm);
        return ceil_div(ic, cfg.nm) * k * k;
    }
};

/// Conv/fc layers reduced to a common geometry; others have no schedule.
inline bool schedulable(const Layer& l) { return l.has_weights(); }

inline ConvGeometry conv_geometry(const Layer& l,
                                  const std::vector<int>& in_shape,
                                  const std::vector<int>& out_shape,
                                  bool first_conv) {
    ConvGeometry g{};
    if (l.kind == LayerKind::Conv) {
        g.ic = l.in_channels;
        g.ih = in_shape[1];
        g.iw = in_shape[2];
        g.oc = l.out_channels;
        g.oh = out_shape[1];
        g.ow = out_shape[2];
        g.k = l.kernel;
        g.stride = l.stride;
        g.pad = l.pad;
        g.flattened = first_conv;
    } else {
        g.ic = l.in_features;
        g.ih = g.iw = 1;
        g.oc = l.out_features;
        g.oh = g.ow = 1;
        g.k = 1;
        g.stride = 1;
        g.pad = 0;
        g.flattened = false;
    }
    return g;
}

}  // namespace detail

/// Analytic per-layer cycle count (the schedule-driven simulation reproduces
/// the same compute total; this is the closed form).
inline LayerPerf layer_cycles(const Layer& l, const std::vector<int>& in_shape,
                              const std::vector<int>& out_shape,
                              const PerfConfig& cfg, bool first_conv = false) {
    LayerPerf p;
    p.name = l.name.empty() ? kind_name(l.kind) : l.name;
    p.kind = l.kind;
    if (!detail::schedulable(l)) {
        p.warning = "pass-through layer, not scheduled on the PE array";
        return p;
    }
    auto g = detail::conv_geometry(l, in_shape, out_shape, first_conv);
    p.macs = g.macs();
    p.compute_cycles = detail::ceil_div(g.oc, cfg.np) *
                       detail::ceil_div(g.out_pixels(), cfg.ng) *
                       g.channel_passes(cfg);
    p.total_cycles = p.compute_cycles;
    p.utilization_pct = 100.0 * static_cast<double>(p.macs) /
                        (static_cast<double>(p.compute_cycles) *
                         static_cast<double>(cfg.macs_per_cycle()));
    return p;
}

// ---------------------------------------------------------------------------
// Schedule compiler
// ---------------------------------------------------------------------------

/// Emits the block-level instruction list for every conv/fc layer:
/// output-channel-major, then spatial, then input-channel, weights resident
/// per output-channel tile whenever they fit half the weight buffer, the
/// whole input feature map resident whenever it fits half the IFMB.
inline std::vector<ScheduleRecord> compile_schedule(const NetworkGraph& net,
                                                    const PerfConfig& cfg) {
    auto shapes = layer_shapes(net);
    std::vector<ScheduleRecord> out;
    int first_conv = -1;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].kind == LayerKind::Conv) {
            first_conv = static_cast<int>(i);
            break;
        }

    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& l = net.layers[li];
        if (!detail::schedulable(l)) continue;
        const auto& in_shape =
            l.inputs[0] < 0 ? net.input_shape : shapes[l.inputs[0]];
        auto g = detail::conv_geometry(l, in_shape, shapes[li],
                                       static_cast<int>(li) == first_conv);
        const std::int64_t half_ifmb = cfg.ifmb_bytes / 2;
        const std::int64_t half_ofmb = cfg.ofmb_bytes / 2;
        const std::int64_t half_wb = cfg.wb_bytes / 2;
        const std::int64_t input_bytes =
            static_cast<std::int64_t>(g.ic) * g.ih * g.iw;
        const std::int64_t all_w_bytes =
            static_cast<std::int64_t>(g.oc) * g.ic * g.k * g.k;
        // Off-chip traffic follows the reuse rule: a tensor that fits its
        // whole buffer stays resident (no ping-pong needed for data that
        // never changes); everything streamed is bounded by the ping-pong
        // half. Loop order follows whichever tensor must stream:
        //   ifm resident  -> output-channel-major, weights stream per tile
        //   w resident    -> spatial-major, the image streams exactly once
        //   neither       -> output-channel-major, image re-streamed per tile
        const bool ifm_resident = input_bytes <= cfg.ifmb_bytes;
        const bool w_resident_all = !ifm_resident && all_w_bytes <= cfg.wb_bytes;
        const std::int64_t channel_passes = g.channel_passes(cfg);
        const int layer_id = static_cast<int>(li);

        // Spatial tile size: multiples of Ng pixels bounded by the OFMB half
        // (16-bit entries) and, when streaming, by the IFMB half.
        const int oc_tile_max = std::min<std::int64_t>(cfg.np, g.oc);
        std::int64_t px_per_tile =
            std::max<std::int64_t>(cfg.ng,
                                   half_ofmb / (2 * oc_tile_max) / cfg.ng * cfg.ng);
        auto region_rows = [&](std::int64_t px0, std::int64_t px1) {
            int row_lo = std::clamp(
                static_cast<int>(px0 / g.ow) * g.stride - g.pad, 0, g.ih);
            int row_hi = std::clamp(
                static_cast<int>((px1 - 1) / g.ow) * g.stride + g.k - g.pad, 0,
                g.ih);
            return std::pair<int, int>{row_lo, row_hi};
        };
        if (!ifm_resident) {
            auto region_bytes = [&](std::int64_t pixels) {
                std::int64_t rows = detail::ceil_div(pixels, g.ow);
                std::int64_t in_rows = std::min<std::int64_t>(
                    g.ih, (rows - 1) * g.stride + g.k);
                return in_rows * g.iw * g.ic;
            };
            while (px_per_tile > cfg.ng && region_bytes(px_per_tile) > half_ifmb)
                px_per_tile -= cfg.ng;
        }

        auto emit_ifm_region = [&](int pass, std::int64_t px0,
                                   std::int64_t px1) {
            auto [row_lo, row_hi] = region_rows(px0, px1);
            std::int64_t bytes =
                static_cast<std::int64_t>(row_hi - row_lo) * g.iw * g.ic;
            std::int64_t chunks =
                std::max<std::int64_t>(1, detail::ceil_div(bytes, half_ifmb));
            for (std::int64_t c = 0; c < chunks; ++c) {
                int ic0 = static_cast<int>(c * g.ic / chunks);
                int ic1 = static_cast<int>((c + 1) * g.ic / chunks);
                out.push_back({ScheduleRecord::Kind::LoadIfm, layer_id, pass,
                               static_cast<std::int64_t>(ic1 - ic0) *
                                   (row_hi - row_lo) * g.iw,
                               0, 0, 0, 0, 0, ic0, ic1, row_lo, row_hi});
            }
        };
        auto emit_compute_store = [&](int pass, int oc0, int oc1,
                                      std::int64_t px0, std::int64_t px1) {
            const std::int64_t groups = detail::ceil_div(px1 - px0, cfg.ng);
            out.push_back({ScheduleRecord::Kind::ComputeTile, layer_id, pass,
                           0, groups * channel_passes, oc0, oc1,
                           static_cast<int>(px0), static_cast<int>(px1), 0, 0,
                           0, 0});
            out.push_back({ScheduleRecord::Kind::StoreOfm, layer_id, pass,
                           static_cast<std::int64_t>(oc1 - oc0) * (px1 - px0),
                           0, oc0, oc1, static_cast<int>(px0),
                           static_cast<int>(px1), 0, 0, 0, 0});
        };

        int pass = 0;
        if (w_resident_all) {
            // Whole weight set parked in the WB; one sweep over the image.
            out.push_back({ScheduleRecord::Kind::LoadW, layer_id, pass,
                           all_w_bytes, 0, 0, g.oc, 0, 0, 0, g.ic, 0, 0});
            for (std::int64_t px0 = 0; px0 < g.out_pixels();
                 px0 += px_per_tile) {
                const std::int64_t px1 =
                    std::min(g.out_pixels(), px0 + px_per_tile);
                emit_ifm_region(pass, px0, px1);
                for (int oc0 = 0; oc0 < g.oc; oc0 += cfg.np) {
                    emit_compute_store(pass, oc0, std::min(g.oc, oc0 + cfg.np),
                                       px0, px1);
                    ++pass;
                }
            }
        } else {
            bool ifm_loaded = false;
            for (int oc0 = 0; oc0 < g.oc; oc0 += cfg.np) {
                const int oc1 = std::min(g.oc, oc0 + cfg.np);
                const std::int64_t w_tile_bytes =
                    static_cast<std::int64_t>(oc1 - oc0) * g.ic * g.k * g.k;
                const bool w_tile_resident = w_tile_bytes <= half_wb;
                bool w_loaded = false;
                for (std::int64_t px0 = 0; px0 < g.out_pixels();
                     px0 += px_per_tile) {
                    const std::int64_t px1 =
                        std::min(g.out_pixels(), px0 + px_per_tile);
                    if (ifm_resident && !ifm_loaded) {
                        out.push_back({ScheduleRecord::Kind::LoadIfm, layer_id,
                                       pass, input_bytes, 0, 0, 0, 0, 0, 0,
                                       g.ic, 0, g.ih});
                        ifm_loaded = true;
                    } else if (!ifm_resident) {
                        emit_ifm_region(pass, px0, px1);
                    }
                    if (!w_loaded || !w_tile_resident) {
                        std::int64_t chunks =
                            w_tile_resident
                                ? 1
                                : detail::ceil_div(w_tile_bytes, half_wb);
                        for (std::int64_t c = 0; c < chunks; ++c) {
                            int ic0 = static_cast<int>(c * g.ic / chunks);
                            int ic1 = static_cast<int>((c + 1) * g.ic / chunks);
                            out.push_back(
                                {ScheduleRecord::Kind::LoadW, layer_id, pass,
                                 static_cast<std::int64_t>(oc1 - oc0) *
                                     (ic1 - ic0) * g.k * g.k,
                                 0, oc0, oc1, 0, 0, ic0, ic1, 0, 0});
                        }
                        w_loaded = true;
                    }
                    emit_compute_store(pass, oc0, oc1, px0, px1);
                    ++pass;
                }
            }
        }
    }
    return out;
}

/// Newline-delimited schedule dump for golden-file comparisons.
inline std::string schedule_dump(const std::vector<ScheduleRecord>& sched) {
    std::string s;
    for (const auto& r : sched) {
        s += "layer=" + std::to_string(r.layer) +
             " pass=" + std::to_string(r.pass) + " " +
             record_kind_name(r.kind) + " oc=[" + std::to_string(r.oc0) + "," +
             std::to_string(r.oc1) + ") px=[" + std::to_string(r.px0) + "," +
             std::to_string(r.px1) + ") ic=[" + std::to_string(r.ic0) + "," +
             std::to_string(r.ic1) + ") bytes=" + std::to_string(r.bytes) +
             " cycles=" + std::to_string(r.compute_cycles) + "\n";
    }
    return s;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Walks the compiled schedule: per pass, time is max(compute, dma) under
/// ping-pong buffering; reports per-layer traffic, stalls, utilization and
/// the bandwidth that would keep every pass compute-bound.
inline NetworkPerf simulate_network(const NetworkGraph& net,
                                    const PerfConfig& cfg) {
    auto shapes = layer_shapes(net);
    auto sched = compile_schedule(net, cfg);
    NetworkPerf report;
    report.layers.resize(net.layers.size());
    int first_conv = -1;
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i].kind == LayerKind::Conv) {
            first_conv = static_cast<int>(i);
            break;
        }
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& in_shape = net.layers[i].inputs[0] < 0
                                   ? net.input_shape
                                   : shapes[net.layers[i].inputs[0]];
        report.layers[i] =
            layer_cycles(net.layers[i], in_shape, shapes[i], cfg,
                         static_cast<int>(i) == first_conv);
        report.layers[i].compute_cycles = 0;  // re-accumulated from the schedule
        report.layers[i].total_cycles = 0;
    }

    // Per (layer, pass) accumulation.
    std::size_t idx = 0;
    while (idx < sched.size()) {
        const int layer = sched[idx].layer;
        const int pass = sched[idx].pass;
        std::int64_t dma_bytes = 0, compute = 0;
        while (idx < sched.size() && sched[idx].layer == layer &&
               sched[idx].pass == pass) {
            const auto& r = sched[idx];
            auto& lp = report.layers[layer];
            switch (r.kind) {
                case ScheduleRecord::Kind::LoadIfm:
                    lp.bytes_in += r.bytes;
                    dma_bytes += r.bytes;
                    break;
                case ScheduleRecord::Kind::LoadW:
                    lp.bytes_w += r.bytes;
                    dma_bytes += r.bytes;
                    break;
                case ScheduleRecord::Kind::StoreOfm:
                    lp.bytes_out += r.bytes;
                    dma_bytes += r.bytes;
                    break;
                case ScheduleRecord::Kind::ComputeTile:
                    compute += r.compute_cycles;
                    break;
            }
            ++idx;
        }
        auto& lp = report.layers[layer];
        std::int64_t dma_cycles = static_cast<std::int64_t>(
            std::ceil(static_cast<double>(dma_bytes) / cfg.dma_bandwidth));
        lp.compute_cycles += compute;
        lp.dma_cycles += dma_cycles;
        lp.total_cycles += std::max(compute, dma_cycles);
        lp.stall_cycles += std::max<std::int64_t>(0, dma_cycles - compute);
        if (compute > 0)
            lp.min_bandwidth = std::max(
                lp.min_bandwidth,
                static_cast<double>(dma_bytes) / static_cast<double>(compute));
    }

    for (auto& lp : report.layers) {
        if (lp.total_cycles > 0)
            lp.utilization_pct =
                100.0 * static_cast<double>(lp.macs) /
                (static_cast<double>(lp.total_cycles) *
                 static_cast<double>(cfg.macs_per_cycle()));
        report.total_cycles += lp.total_cycles;
        report.total_macs += lp.macs;
        report.bytes_in += lp.bytes_in;
        report.bytes_w += lp.bytes_w;
        report.bytes_out += lp.bytes_out;
        report.min_bandwidth = std::max(report.min_bandwidth, lp.min_bandwidth);
    }
    if (report.total_cycles > 0)
        report.utilization_pct =
            100.0 * static_cast<double>(report.total_macs) /
            (static_cast<double>(report.total_cycles) *
             static_cast<double>(cfg.macs_per_cycle()));
    report.seconds = static_cast<double>(report.total_cycles) / cfg.clock_hz;
    return report;
}

/// CSV view of a report (one row per layer plus a totals row).
inline std::string perf_report_csv(const NetworkPerf& r) {
    std::string s =
        "name,kind,compute_cycles,dma_cycles,stall_cycles,total_cycles,"
        "utilization_pct,macs,bytes_in,bytes_w,bytes_out,min_bandwidth\n";
    auto row = [&](const LayerPerf& l) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3f", l.utilization_pct);
        std::string util = buf;
        std::snprintf(buf, sizeof buf, "%.3f", l.min_bandwidth);
        s += l.name + "," + kind_name(l.kind) + "," +
             std::to_string(l.compute_cycles) + "," +
             std::to_string(l.dma_cycles) + "," +
             std::to_string(l.stall_cycles) + "," +
             std::to_string(l.total_cycles) + "," + util + "," +
             std::to_string(l.macs) + "," + std::to_string(l.bytes_in) + "," +
             std::to_string(l.bytes_w) + "," + std::to_string(l.bytes_out) +
             "," + buf + "\n";
    };
    for (const auto& l : r.layers) row(l);
    std::int64_t compute = 0, dma = 0, stall = 0;
    for (const auto& l : r.layers) {
        compute += l.compute_cycles;
        dma += l.dma_cycles;
        stall += l.stall_cycles;
    }
    char util[64], bw[64];
    std::snprintf(util, sizeof util, "%.3f", r.utilization_pct);
    std::snprintf(bw, sizeof bw, "%.3f", r.min_bandwidth);
    s += std::string("TOTAL,,") + std::to_string(compute) + "," +
         std::to_string(dma) + "," + std::to_string(stall) + "," +
         std::to_string(r.total_cycles) + "," + util + "," +
         std::to_string(r.total_macs) + "," + std::to_string(r.bytes_in) +
         "," + std::to_string(r.bytes_w) + "," + std::to_string(r.bytes_out) +
         "," + bw + "\n";
    return s;
}

}  // namespace phoenix
