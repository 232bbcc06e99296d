// phoenix: quantize fp32 CNN models to 8-bit floating point, run bit-exact
// emulated inference, sweep formats and truncation widths, and simulate the
// PE-array cycle model.
//
// Every command writes a machine-readable JSON report next to its primary
// output. Exit codes: 0 success, 2 usage/parse errors, 3 numerical
// degeneracy.

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "phoenix/phoenix.hpp"

using json = nlohmann::ordered_json;
using namespace phoenix;

namespace {

int thread_budget() {
    if (const char* env = std::getenv("PHOENIX_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n) on up to thread_budget() workers. Results go
/// into per-index slots, so the outcome is independent of scheduling.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
    int workers = std::min(n, thread_budget());
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

void write_text(const std::string& path, const std::string& text) {
    io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_report(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

struct Options {
    std::string model, qmodel, calib, input, reference, out;
    std::string format = "M4E3";
    std::string stats_mode = "second_moment";
    std::string preset = "default";
    std::string sweep;
    int t = 14;
    int batch = 1;
    std::uint64_t seed = 0;
    bool format_set = false;
};

json manifest(const std::string& command, const Options& o) {
    json m;
    m["command"] = command;
    if (!o.model.empty()) m["model"] = o.model;
    if (!o.qmodel.empty()) m["qmodel"] = o.qmodel;
    if (!o.calib.empty()) m["calib"] = o.calib;
    if (!o.input.empty()) m["input"] = o.input;
    if (!o.reference.empty()) m["reference"] = o.reference;
    m["format"] = o.format;
    m["t"] = o.t;
    m["stats_mode"] = o.stats_mode;
    m["batch"] = o.batch;
    m["preset"] = o.preset;
    if (!o.sweep.empty()) m["sweep"] = o.sweep;
    m["out"] = o.out;
    m["seed"] = o.seed;
    return m;
}

StatsMode parse_stats_mode(const std::string& s) {
    if (s == "second_moment") return StatsMode::SecondMoment;
    if (s == "mean_std") return StatsMode::MeanStd;
    throw CLI::ValidationError("--stats-mode must be second_moment or mean_std");
}

std::vector<Tensor> load_calib(const Options& o) {
    if (o.calib.empty())
        throw std::invalid_argument("a --calib tensor file is required");
    auto batch = tensor_as_batch(load_tensor(o.calib));
    if (batch.empty()) throw DegeneracyError("empty calibration set");
    if (static_cast<int>(batch.size()) > o.batch)
        batch.resize(o.batch);
    return batch;
}

json error_report_json(const ErrorReport& rep) {
    json j;
    j["layers"] = json::array();
    for (const auto& l : rep.layers) {
        json e;
        e["name"] = l.name;
        e["relative_l2_pct"] = l.relative_l2_pct;
        e["max_abs"] = l.max_abs;
        e["changed_code_fraction"] = l.changed_code_fraction;
        j["layers"].push_back(e);
    }
    j["total_relative_l2_pct"] = rep.total_relative_l2_pct;
    j["total_max_abs"] = rep.total_max_abs;
    j["total_changed_code_fraction"] = rep.total_changed_code_fraction;
    j["accumulator_overflow"] = rep.accumulator_overflow;
    return j;
}

std::string merged_model_path(const std::string& out) {
    return out + ".merged.phnx";
}

// ---------------------------------------------------------------------------

int cmd_quantize(const Options& o) {
    auto fmt = MiniFloatFormat::parse(o.format);
    auto mode = parse_stats_mode(o.stats_mode);
    auto net = load_model(o.model);
    auto calib = load_calib(o);
    auto stats = collect_stats(net, calib, mode);
    auto merged = merge_normalization(net, stats, mode);
    auto q = quantize_network(net, stats, calib, fmt, mode);

    save_qmodel(q, o.out);
    save_model(merged, merged_model_path(o.out));

    json rep;
    rep["manifest"] = manifest("quantize", o);
    rep["format"] = fmt.name();
    rep["h_s_act"] = q.h_s_act;
    rep["stats_mode"] = stats_mode_name(mode);
    rep["calibration_images"] = calib.size();
    rep["merged_model"] = merged_model_path(o.out);
    rep["layers"] = json::array();
    for (std::size_t i = 0; i < q.graph.layers.size(); ++i) {
        const Layer& l = q.graph.layers[i];
        json e;
        e["name"] = l.name;
        e["kind"] = kind_name(l.kind);
        e["act_scale"] = q.params[i].act_scale;
        if (mode == StatsMode::SecondMoment) {
            e["second_moment"] = stats[i].second_moment;
        } else {
            e["mean"] = stats[i].mean;
            e["std"] = stats[i].stddev;
        }
        if (l.has_weights()) {
            e["h_s_w"] = q.params[i].h_s_w;
            e["bias_frac_bits"] = q.params[i].bias.frac_bits;
            e["weight_mse"] = quantization_mse(merged.layers[i].weights.data,
                                               q.params[i].h_s_w, fmt);
        }
        rep["layers"].push_back(e);
    }
    write_report(o.out + ".report.json", rep);
    std::cout << "wrote " << o.out << " (h_s_act=" << q.h_s_act << ")\n";
    return 0;
}

int cmd_infer(const Options& o) {
    auto q = load_qmodel(o.qmodel);
    auto input = load_tensor(o.input);
    std::optional<std::vector<Tensor>> reference;
    if (!o.reference.empty())
        reference = infer_fp32(load_model(o.reference), input);
    auto r = infer_quantized(q, input, o.t,
                             reference ? &*reference : nullptr);
    save_tensor(r.output, o.out);

    json rep;
    rep["manifest"] = manifest("infer", o);
    rep["format"] = q.fmt.name();
    rep["h_s_act"] = q.h_s_act;
    rep["t"] = o.t;
    rep["output"] = o.out;
    rep["accumulator_overflow"] = r.accumulator_overflow;
    if (reference) rep["error"] = error_report_json(r.report);
    write_report(o.out + ".report.json", rep);
    std::cout << "wrote " << o.out << "\n";
    return 0;
}

int cmd_sweep_formats(const Options& o) {
    auto mode = parse_stats_mode(o.stats_mode);
    auto net = load_model(o.model);
    auto calib = load_calib(o);
    if (o.input.empty())
        throw std::invalid_argument("--input (held-out tensor) is required");
    auto probe = load_tensor(o.input);

    std::vector<MiniFloatFormat> formats;
    if (o.format_set) {
        formats.push_back(MiniFloatFormat::parse(o.format));
    } else {
        formats = all_formats();
    }
    struct Row {
        std::string format;
        bool ok = false;
        std::string error;
        int h_s_act = 0;
        double rel_l2_pct = 0.0;
        double max_abs = 0.0;
        double changed = 0.0;
    };
    std::vector<Row> rows(formats.size());
    auto stats = collect_stats(net, calib, mode);
    auto merged = merge_normalization(net, stats, mode);
    auto reference = infer_fp32(merged, probe);

    parallel_for(static_cast<int>(formats.size()), [&](int i) {
        Row& row = rows[i];
        row.format = formats[i].name();
        try {
            auto q = quantize_network(net, stats, calib, formats[i], mode);
            int t = std::min(o.t, product_span_bits(formats[i]));
            auto r = infer_quantized(q, probe, t, &reference);
            row.ok = true;
            row.h_s_act = q.h_s_act;
            row.rel_l2_pct = r.report.total_relative_l2_pct;
            row.max_abs = r.report.total_max_abs;
            row.changed = r.report.total_changed_code_fraction;
        } catch (const std::exception& e) {
            row.error = e.what();  // per-format failure; the sweep continues
        }
    });

    std::string csv =
        "format,status,h_s_act,relative_l2_pct,max_abs,changed_code_fraction\n";
    json rep;
    rep["manifest"] = manifest("sweep-formats", o);
    rep["rows"] = json::array();
    char buf[128];
    for (const auto& row : rows) {
        json e;
        e["format"] = row.format;
        e["status"] = row.ok ? "ok" : "error";
        if (row.ok) {
            e["h_s_act"] = row.h_s_act;
            e["relative_l2_pct"] = row.rel_l2_pct;
            e["max_abs"] = row.max_abs;
            e["changed_code_fraction"] = row.changed;
            std::snprintf(buf, sizeof buf, "%s,ok,%d,%.6f,%.6f,%.6f\n",
                          row.format.c_str(), row.h_s_act, row.rel_l2_pct,
                          row.max_abs, row.changed);
        } else {
            e["error"] = row.error;
            std::snprintf(buf, sizeof buf, "%s,error,,,,\n",
                          row.format.c_str());
        }
        rep["rows"].push_back(e);
        csv += buf;
    }
    write_text(o.out, csv);
    write_report(o.out + ".report.json", rep);
    std::cout << "wrote " << o.out << "\n";
    return 0;
}

struct SweepSpec {
    std::string param;  // Nm | Ng | Np
    int lo = 1, hi = 1, factor = 2;
};

SweepSpec parse_sweep(const std::string& s) {
    // "Np=1..128x2"
    SweepSpec spec;
    auto eq = s.find('=');
    auto dots = s.find("..");
    auto x = s.find('x', dots == std::string::npos ? 0 : dots);
    if (eq == std::string::npos || dots == std::string::npos ||
        x == std::string::npos || eq > dots || dots > x)
        throw CLI::ValidationError("--sweep expects Param=lo..hiXfactor, e.g. "
                                   "Np=1..128x2");
    spec.param = s.substr(0, eq);
    if (spec.param != "Nm" && spec.param != "Ng" && spec.param != "Np")
        throw CLI::ValidationError("--sweep parameter must be Nm, Ng or Np");
    spec.lo = std::stoi(s.substr(eq + 1, dots - eq - 1));
    spec.hi = std::stoi(s.substr(dots + 2, x - dots - 2));
    spec.factor = std::stoi(s.substr(x + 1));
    if (spec.lo < 1 || spec.hi < spec.lo || spec.factor < 2)
        throw CLI::ValidationError("--sweep range is malformed");
    return spec;
}

json layer_perf_json(const LayerPerf& l) {
    json e;
    e["name"] = l.name;
    e["kind"] = kind_name(l.kind);
    e["compute_cycles"] = l.compute_cycles;
    e["dma_cycles"] = l.dma_cycles;
    e["stall_cycles"] = l.stall_cycles;
    e["total_cycles"] = l.total_cycles;
    e["utilization_pct"] = l.utilization_pct;
    e["macs"] = l.macs;
    e["bytes_in"] = l.bytes_in;
    e["bytes_w"] = l.bytes_w;
    e["bytes_out"] = l.bytes_out;
    e["min_bandwidth_bytes_per_cycle"] = l.min_bandwidth;
    if (!l.warning.empty()) e["warning"] = l.warning;
    return e;
}

int cmd_simulate(const Options& o) {
    auto net = load_model(o.model);
    auto cfg = perf_preset(o.preset);

    json rep;
    rep["manifest"] = manifest("simulate", o);
    rep["preset"] = o.preset;
    rep["config"] = {{"Nm", cfg.nm},
                     {"Ng", cfg.ng},
                     {"Np", cfg.np},
                     {"IFMB_bytes", cfg.ifmb_bytes},
                     {"OFMB_bytes", cfg.ofmb_bytes},
                     {"WB_bytes", cfg.wb_bytes},
                     {"dma_bandwidth_bytes_per_cycle", cfg.dma_bandwidth},
                     {"clock_hz", cfg.clock_hz}};
    rep["peak_throughput_mac_per_s"] = peak_throughput(cfg);

    auto run = simulate_network(net, cfg);
    rep["total_cycles"] = run.total_cycles;
    rep["total_macs"] = run.total_macs;
    rep["utilization_pct"] = run.utilization_pct;
    rep["seconds"] = run.seconds;
    rep["min_bandwidth_bytes_per_cycle"] = run.min_bandwidth;
    rep["layers"] = json::array();
    for (const auto& l : run.layers) rep["layers"].push_back(layer_perf_json(l));

    if (!o.sweep.empty()) {
        auto spec = parse_sweep(o.sweep);
        rep["sweep"] = json::array();
        for (int v = spec.lo; v <= spec.hi; v *= spec.factor) {
            PerfConfig swept = cfg;
            if (spec.param == "Nm") swept.nm = v;
            if (spec.param == "Ng") swept.ng = v;
            if (spec.param == "Np") swept.np = v;
            auto r = simulate_network(net, swept);
            json e;
            e[spec.param] = v;
            e["total_cycles"] = r.total_cycles;
            e["utilization_pct"] = r.utilization_pct;
            e["min_bandwidth_bytes_per_cycle"] = r.min_bandwidth;
            // On-chip feed widths per cycle (IFMB Ng*Nm, WB Np*Nm bytes,
            // OFMB Np*Ng 16-bit entries): the buffers must keep every PE fed.
            e["wb_feed_bytes_per_cycle"] = swept.np * swept.nm;
            e["ifmb_feed_bytes_per_cycle"] = swept.ng * swept.nm;
            e["ofmb_feed_bytes_per_cycle"] = 2 * swept.np * swept.ng;
            e["peak_throughput_mac_per_s"] = peak_throughput(swept);
            rep["sweep"].push_back(e);
        }
    }
    write_report(o.out, rep);
    write_text(o.out + ".csv", perf_report_csv(run));
    std::cout << "wrote " << o.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"8-bit floating-point CNN quantizer, datapath emulator and "
                 "PE-array performance model"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--format", o.format, "MaEb format string, e.g. M4E3")
            ->check([&](const std::string& s) {
                o.format_set = true;
                try {
                    MiniFloatFormat::parse(s);
                } catch (const std::exception& e) {
                    return std::string(e.what());
                }
                return std::string();
            });
        cmd->add_option("--t", o.t, "truncation width in bits")
            ->check(CLI::Range(7, 22));
        cmd->add_option("--seed", o.seed, "recorded in the run manifest");
        cmd->add_option("--out", o.out, "primary output path")->required();
    };

    CLI::App* quantize =
        app.add_subcommand("quantize", "quantize an fp32 model container");
    quantize->add_option("--model", o.model)->required();
    quantize->add_option("--calib", o.calib)->required();
    quantize->add_option("--stats-mode", o.stats_mode)
        ->check(CLI::IsMember({"second_moment", "mean_std"}));
    quantize->add_option("--batch", o.batch)
        ->check(CLI::IsMember({1, 100}));
    add_common(quantize);

    CLI::App* infer =
        app.add_subcommand("infer", "run emulated quantized inference");
    infer->add_option("--qmodel", o.qmodel)->required();
    infer->add_option("--input", o.input)->required();
    infer->add_option("--reference", o.reference,
                      "fp32 model for error columns (use the .merged.phnx "
                      "written by quantize)");
    add_common(infer);

    CLI::App* sweep = app.add_subcommand(
        "sweep-formats", "quantize+infer across all 8 MaEb formats");
    sweep->add_option("--model", o.model)->required();
    sweep->add_option("--calib", o.calib)->required();
    sweep->add_option("--input", o.input)->required();
    sweep->add_option("--stats-mode", o.stats_mode)
        ->check(CLI::IsMember({"second_moment", "mean_std"}));
    sweep->add_option("--batch", o.batch)->check(CLI::IsMember({1, 100}));
    add_common(sweep);

    CLI::App* simulate =
        app.add_subcommand("simulate", "cycle-level PE array simulation");
    simulate->add_option("--model", o.model)->required();
    simulate->add_option("--preset", o.preset,
                         "perf preset: default | eyeriss-iso");
    simulate->add_option("--sweep", o.sweep, "e.g. Np=1..128x2");
    add_common(simulate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints help or the error
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(quantize)) return cmd_quantize(o);
        if (app.got_subcommand(infer)) return cmd_infer(o);
        if (app.got_subcommand(sweep)) return cmd_sweep_formats(o);
        if (app.got_subcommand(simulate)) return cmd_simulate(o);
    } catch (const DegeneracyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::overflow_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
