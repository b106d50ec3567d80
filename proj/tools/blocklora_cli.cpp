// blocklora command-line interface.
//
// Subcommands:
//   check           run the property suite, print PASS/FAIL per check
//   run             sweep (r, n, K) episodes on the synthetic task, emit CSV + JSON
//   cost            parameter / MAC cost report for one layer shape
//   bound           closed-form generalization bounds
//   export-adapter  build a seeded adapter and write a checkpoint
//   import-adapter  load a checkpoint and print its header and norms
//
// Exit codes: 0 success, 1 property failure, 2 configuration error, 3 I/O error.
// If BLOCKLORA_OUT_DIR is set, relative output paths are placed under it.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blocklora/adapter.hpp"
#include "blocklora/checkpoint.hpp"
#include "blocklora/costmodel.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/harness.hpp"
#include "blocklora/kernels.hpp"
#include "blocklora/properties.hpp"

namespace {

using blocklora::ConfigError;
using blocklora::ExperimentSpec;
using blocklora::IoError;
using nlohmann::json;

std::string resolve_out_path(const std::string& path) {
    const char* dir = std::getenv("BLOCKLORA_OUT_DIR");
    if (dir == nullptr || *dir == '\0' || path.empty() || path.front() == '/') return path;
    return std::string(dir) + "/" + path;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json parsed;
    try {
        in >> parsed;
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return parsed;
}

void write_json_file(const std::string& path, const json& value) {
    blocklora::write_text_file(path, value.dump(2) + "\n");
}

template <typename T>
void assign_if(const json& obj, const char* key, T& target) {
    if (obj.contains(key)) target = obj.at(key).get<T>();
}

ExperimentSpec spec_from_json(const json& config) {
    static const std::vector<std::string> known = {
        "seed",     "task",       "tower",    "placement", "sweep",     "steps",     "repeats",
        "loss",     "temperature", "optimizer", "init_std",  "scaling",   "freeze_down", "precision"};
    for (auto it = config.begin(); it != config.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ConfigError("unknown config key '" + it.key() + "'");
        }
    }

    ExperimentSpec spec;
    assign_if(config, "seed", spec.seed);
    if (config.contains("task")) {
        const json& task = config.at("task");
        assign_if(task, "classes", spec.classes);
        assign_if(task, "input_dim", spec.input_dim);
        assign_if(task, "noise_std", spec.noise_std);
        assign_if(task, "queries_per_class", spec.queries_per_class);
    }
    if (config.contains("tower")) {
        const json& tower = config.at("tower");
        assign_if(tower, "dims", spec.tower_dims);
        assign_if(tower, "misalignment", spec.tower_misalignment);
    }
    assign_if(config, "placement", spec.placement);
    if (config.contains("sweep")) {
        const json& sweep = config.at("sweep");
        assign_if(sweep, "r", spec.r_list);
        assign_if(sweep, "n", spec.n_list);
        assign_if(sweep, "K", spec.k_list);
    }
    assign_if(config, "steps", spec.steps);
    assign_if(config, "repeats", spec.repeats);
    if (config.contains("loss")) spec.loss = blocklora::parse_loss_variant(config.at("loss").get<std::string>());
    assign_if(config, "temperature", spec.temperature);
    if (config.contains("optimizer")) {
        const json& opt = config.at("optimizer");
        assign_if(opt, "lr", spec.optimizer.lr);
        assign_if(opt, "beta1", spec.optimizer.beta1);
        assign_if(opt, "beta2", spec.optimizer.beta2);
        assign_if(opt, "eps", spec.optimizer.eps);
        assign_if(opt, "weight_decay", spec.optimizer.weight_decay);
    }
    assign_if(config, "init_std", spec.init_std);
    assign_if(config, "scaling", spec.scaling);
    assign_if(config, "freeze_down", spec.freeze_down);
    assign_if(config, "precision", spec.precision);
    return spec;
}

json spec_to_json(const ExperimentSpec& spec) {
    json j;
    j["seed"] = spec.seed;
    j["task"] = {{"classes", spec.classes},
                 {"input_dim", spec.input_dim},
                 {"noise_std", spec.noise_std},
                 {"queries_per_class", spec.queries_per_class}};
    j["tower"] = {{"dims", spec.tower_dims}, {"misalignment", spec.tower_misalignment}};
    j["placement"] = spec.placement;
    j["sweep"] = {{"r", spec.r_list}, {"n", spec.n_list}, {"K", spec.k_list}};
    j["steps"] = spec.steps;
    j["repeats"] = spec.repeats;
    j["loss"] = blocklora::loss_variant_name(spec.loss);
    j["temperature"] = spec.temperature;
    j["optimizer"] = {{"lr", spec.optimizer.lr},
                      {"beta1", spec.optimizer.beta1},
                      {"beta2", spec.optimizer.beta2},
                      {"eps", spec.optimizer.eps},
                      {"weight_decay", spec.optimizer.weight_decay}};
    j["init_std"] = spec.init_std;
    j["scaling"] = spec.scaling;
    j["freeze_down"] = spec.freeze_down;
    j["precision"] = spec.precision;
    return j;
}

std::string summary_path_for(const std::string& csv_path) {
    std::string base = csv_path;
    if (base.size() > 4 && base.substr(base.size() - 4) == ".csv") base.resize(base.size() - 4);
    return base + ".summary.json";
}

int cmd_check(std::uint64_t seed, double perturb_grad, const std::string& out_path) {
    blocklora::PropertyOptions options;
    options.seed = seed;
    options.grad_perturbation = perturb_grad;
    const auto results = blocklora::run_property_suite(options);

    std::string report;
    bool all_pass = true;
    char line[256];
    for (const auto& r : results) {
        std::snprintf(line, sizeof(line), "[%s] %-28s max deviation %.3e (threshold %.3e) %s\n",
                      r.pass ? "PASS" : "FAIL", r.name.c_str(), r.deviation, r.threshold, r.detail.c_str());
        report += line;
        all_pass = all_pass && r.pass;
    }
    report += all_pass ? "all checks passed\n" : "CHECK FAILURE\n";
    std::fputs(report.c_str(), stdout);
    if (!out_path.empty()) blocklora::write_text_file(resolve_out_path(out_path), report);
    if (!all_pass) {
        for (const auto& r : results) {
            if (!r.pass) std::fprintf(stderr, "failing check: %s\n", r.name.c_str());
        }
    }
    return all_pass ? 0 : 1;
}

int cmd_run(const ExperimentSpec& spec, const std::string& out_path) {
    const std::string csv_path = resolve_out_path(out_path);
    const auto result = blocklora::run_sweep_dispatch(spec);
    blocklora::write_text_file(csv_path, blocklora::format_result_csv(result.rows));

    blocklora::PropertyOptions options;
    options.seed = spec.seed;
    const auto properties = blocklora::run_property_suite(options);

    json summary;
    summary["spec"] = spec_to_json(spec);
    summary["zero_shot_accuracy"] = result.zero_shot_accuracy;
    json means = json::array();
    for (const auto& mean : result.means) {
        means.push_back(
            {{"r", mean.r}, {"n", mean.n}, {"K", mean.k_shot}, {"accuracy", mean.accuracy}, {"loss", mean.loss}});
    }
    summary["means"] = means;
    summary["k_trend_non_decreasing"] = result.k_trend_ok;
    json digest;
    bool all_pass = true;
    for (const auto& p : properties) {
        digest[p.name] = p.pass;
        all_pass = all_pass && p.pass;
    }
    summary["properties"] = digest;
    summary["properties_all_pass"] = all_pass;
    if (spec.timing) {
        std::uint64_t total = 0;
        for (const auto& row : result.rows) total += row.wall_ms;
        summary["wall_ms_total"] = total;
    }
    write_json_file(summary_path_for(csv_path), summary);

    std::printf("wrote %zu rows to %s (zero-shot %.2f%%)\n", result.rows.size(), csv_path.c_str(),
                result.zero_shot_accuracy);
    for (const auto& mean : result.means) {
        std::printf("  r=%d n=%d K=%-2d  mean accuracy %6.2f%%  mean loss %.6f\n", mean.r, mean.n, mean.k_shot,
                    mean.accuracy, mean.loss);
    }
    return 0;
}

int cmd_cost(int k, int d, int r, int n, int m, const std::string& out_path) {
    blocklora::BoundInputs bounds;
    bounds.r = r;
    bounds.n = n;
    bounds.layers = {{k, d}};
    if (m <= 0) m = d;  // per-matrix convention: batch rows default to d
    const auto report = blocklora::make_cost_report(k, d, r, n, m, bounds);

    std::printf("cost report (k=%d d=%d r=%d n=%d m=%d)\n", k, d, r, n, m);
    std::printf("  %-22s %12lld\n", "lora params", report.lora_params);
    std::printf("  %-22s %12lld\n", "block params", report.block_params);
    std::printf("  %-22s %12.6f\n", "param proportion", report.param_proportion);
    std::printf("  %-22s %12llu\n", "lora adapter MACs", static_cast<unsigned long long>(report.lora_macs));
    std::printf("  %-22s %12llu\n", "block adapter MACs", static_cast<unsigned long long>(report.block_macs));
    std::printf("  %-22s %12.6f\n", "MAC ratio", report.mac_ratio);
    std::printf("  %-22s %12.6f\n", "ops ratio (incl adds)", report.ops_ratio);
    std::printf("  %-22s %12.6f\n", "lora bound", report.lora_bound);
    std::printf("  %-22s %12.6f\n", "block bound", report.block_bound);
    std::printf("  %-22s %12.6f\n", "bound ratio", report.bound_ratio);

    if (!out_path.empty()) {
        json j;
        j["k"] = k;
        j["d"] = d;
        j["r"] = r;
        j["n"] = n;
        j["m"] = m;
        j["lora_params"] = report.lora_params;
        j["block_params"] = report.block_params;
        j["param_proportion"] = report.param_proportion;
        j["lora_macs"] = report.lora_macs;
        j["block_macs"] = report.block_macs;
        j["mac_ratio"] = report.mac_ratio;
        j["ops_ratio"] = report.ops_ratio;
        j["lora_bound"] = report.lora_bound;
        j["block_bound"] = report.block_bound;
        j["bound_ratio"] = report.bound_ratio;
        write_json_file(resolve_out_path(out_path), j);
    }
    return 0;
}

blocklora::BoundInputs parse_bound_inputs(int q, double sigma, long long samples, int r, int n,
                                          const std::vector<std::string>& layer_specs) {
    blocklora::BoundInputs inputs;
    inputs.q = q;
    inputs.sigma = sigma;
    inputs.sample_count = samples;
    inputs.r = r;
    inputs.n = n;
    for (const std::string& text : layer_specs) {
        const auto sep = text.find('x');
        if (sep == std::string::npos) {
            throw ConfigError("layer spec '" + text + "' must look like KxD, e.g. 512x512");
        }
        try {
            inputs.layers.emplace_back(std::stoi(text.substr(0, sep)), std::stoi(text.substr(sep + 1)));
        } catch (const std::exception&) {
            throw ConfigError("layer spec '" + text + "' must look like KxD, e.g. 512x512");
        }
    }
    if (inputs.layers.empty()) inputs.layers = {{512, 512}};
    return inputs;
}

int cmd_bound(const blocklora::BoundInputs& inputs, const std::string& out_path) {
    const double lora = blocklora::bound_lora(inputs);
    const double block = blocklora::bound_block(inputs);
    std::printf("generalization bounds (q=%d sigma=%g #S=%lld r=%d n=%d, %zu layer(s))\n", inputs.q, inputs.sigma,
                inputs.sample_count, inputs.r, inputs.n, inputs.layers.size());
    std::printf("  %-22s %12.6f\n", "lora bound", lora);
    std::printf("  %-22s %12.6f\n", "block bound", block);
    std::printf("  %-22s %12.6f\n", "bound ratio", block / lora);

    if (!out_path.empty()) {
        json j;
        j["q"] = inputs.q;
        j["sigma"] = inputs.sigma;
        j["sample_count"] = inputs.sample_count;
        j["r"] = inputs.r;
        j["n"] = inputs.n;
        json layers = json::array();
        for (const auto& [lk, ld] : inputs.layers) layers.push_back({{"k", lk}, {"d", ld}});
        j["layers"] = layers;
        j["lora_bound"] = lora;
        j["block_bound"] = block;
        j["bound_ratio"] = block / lora;
        write_json_file(resolve_out_path(out_path), j);
    }
    return 0;
}

template <typename T>
int export_adapter_impl(int k, int d, int r, int n, std::uint64_t seed, double init_std, double scaling,
                        bool freeze_down, const std::string& out_path) {
    blocklora::AdapterConfig config;
    config.rank = r;
    config.blocks = n;
    config.init_std = init_std;
    config.scaling = scaling;
    config.freeze_down = freeze_down;
    const auto adapter = blocklora::init_adapter<T>(config, static_cast<std::size_t>(k),
                                                    static_cast<std::size_t>(d), seed);
    const std::string path = resolve_out_path(out_path);
    blocklora::save_adapter(adapter, path);
    std::printf("wrote adapter checkpoint %s (k=%d d=%d r=%d n=%d, %s)\n", path.c_str(), k, d, r, n,
                sizeof(T) == 8 ? "f64" : "f32");
    return 0;
}

template <typename T>
int import_adapter_impl(const std::string& path) {
    const auto adapter = blocklora::load_adapter<T>(path);
    const bool frozen = blocklora::adapter_freezes_down(adapter);
    std::visit(
        [&](const auto& a) {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, blocklora::LoraAdapter<T>>) {
                std::printf("vanilla low-rank adapter: k=%zu d=%zu r=%zu\n", a.in_dim(), a.out_dim(), a.rank());
                std::printf("  down-projection max |entry| %.6g\n", blocklora::max_abs(a.down()));
                std::printf("  up-projection   max |entry| %.6g\n", blocklora::max_abs(a.up()));
            } else {
                std::printf("block adapter: k=%zu d=%zu r=%zu n=%zu%s\n", a.in_dim(), a.out_dim(), a.rank(),
                            a.blocks(), frozen ? " (frozen down-projection)" : "");
                std::printf("  shared down-projection max |entry| %.6g\n", blocklora::max_abs(a.shared_down()));
                for (std::size_t i = 0; i < a.blocks(); ++i) {
                    std::printf("  up block %zu max |entry| %.6g\n", i, blocklora::max_abs(a.up_blocks()[i]));
                }
            }
        },
        adapter);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Block-partitioned low-rank adaptation engine"};
    app.require_subcommand(1);

    std::string backend = "auto";
    app.add_option("--backend", backend, "kernel backend: auto, scalar or avx2")->capture_default_str();

    // check
    auto* check = app.add_subcommand("check", "run the equivalence/property suite");
    std::uint64_t check_seed = 1;
    double perturb_grad = 0.0;
    std::string check_out;
    check->add_option("--seed", check_seed, "property suite seed")->capture_default_str();
    check->add_option("--out", check_out, "also write the report to this file");
    check->add_option("--perturb-grad", perturb_grad,
                      "inject this offset into one analytic gradient (checker self-test)");

    // run
    auto* run = app.add_subcommand("run", "train and evaluate the (r, n, K) sweep");
    std::string run_config_path, run_out = "results.csv";
    std::uint64_t run_seed = 0;
    bool run_seed_set = false, run_freeze = false, run_timing = false;
    std::string run_precision, run_loss;
    int run_steps = -1, run_repeats = -1;
    run->add_option("--config", run_config_path, "JSON experiment config");
    run->add_option("--out", run_out, "CSV output path")->capture_default_str();
    run->add_option("--seed", run_seed, "master seed (overrides config)")->each([&](const std::string&) {
        run_seed_set = true;
    });
    run->add_option("--precision", run_precision, "f32 or f64 (overrides config)");
    run->add_option("--loss", run_loss, "as-written or classwise (overrides config)");
    run->add_flag("--freeze-down", run_freeze, "train with the down-projection frozen at its random init");
    run->add_flag("--timing", run_timing, "record wall times in the CSV (makes output non-reproducible)");
    run->add_option("--steps", run_steps, "training steps per episode (overrides config)");
    run->add_option("--repeats", run_repeats, "repeats per sweep cell (overrides config)");

    // cost
    auto* cost = app.add_subcommand("cost", "parameter and MAC cost report for one layer");
    int cost_k = 512, cost_d = 512, cost_r = 2, cost_n = 2, cost_m = 0;
    std::string cost_out;
    cost->add_option("--k", cost_k, "layer input width")->capture_default_str();
    cost->add_option("--d", cost_d, "layer output width")->capture_default_str();
    cost->add_option("--r", cost_r, "adapter rank")->capture_default_str();
    cost->add_option("--n", cost_n, "block count")->capture_default_str();
    cost->add_option("--m", cost_m, "batch rows for the measured MACs (default: d)");
    cost->add_option("--out", cost_out, "write a JSON copy here");

    // bound
    auto* bound = app.add_subcommand("bound", "closed-form generalization bounds");
    int bound_q = 16, bound_r = 2, bound_n = 2;
    double bound_sigma = 1.0;
    long long bound_samples = 16000;
    std::vector<std::string> bound_layers;
    std::string bound_out;
    bound->add_option("--q", bound_q, "bits per tuned parameter")->capture_default_str();
    bound->add_option("--sigma", bound_sigma, "sub-Gaussian parameter")->capture_default_str();
    bound->add_option("--samples", bound_samples, "training sample count #S")->capture_default_str();
    bound->add_option("--r", bound_r, "adapter rank")->capture_default_str();
    bound->add_option("--n", bound_n, "block count")->capture_default_str();
    bound->add_option("--layer", bound_layers, "adapted layer as KxD (repeatable; default 512x512)");
    bound->add_option("--out", bound_out, "write a JSON copy here");

    // export-adapter
    auto* exporter = app.add_subcommand("export-adapter", "build a seeded adapter and save a checkpoint");
    int exp_k = 64, exp_d = 64, exp_r = 2, exp_n = 2;
    std::uint64_t exp_seed = 1;
    double exp_init_std = 0.02, exp_scaling = 1.0;
    bool exp_freeze = false;
    std::string exp_out = "adapter.blra", exp_precision = "f64";
    exporter->add_option("--k", exp_k, "layer input width")->capture_default_str();
    exporter->add_option("--d", exp_d, "layer output width")->capture_default_str();
    exporter->add_option("--r", exp_r, "adapter rank")->capture_default_str();
    exporter->add_option("--n", exp_n, "block count")->capture_default_str();
    exporter->add_option("--seed", exp_seed, "init seed")->capture_default_str();
    exporter->add_option("--init-std", exp_init_std, "down-projection init std")->capture_default_str();
    exporter->add_option("--scaling", exp_scaling, "update scaling")->capture_default_str();
    exporter->add_flag("--freeze-down", exp_freeze, "mark the down-projection frozen");
    exporter->add_option("--precision", exp_precision, "f32 or f64")->capture_default_str();
    exporter->add_option("--out", exp_out, "checkpoint path")->capture_default_str();

    // import-adapter
    auto* importer = app.add_subcommand("import-adapter", "load a checkpoint and print a summary");
    std::string imp_path, imp_precision = "f64";
    importer->add_option("path", imp_path, "checkpoint path")->required();
    importer->add_option("--precision", imp_precision, "f32 or f64")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        blocklora::kernels::set_active(blocklora::kernels::parse(backend));

        if (check->parsed()) return cmd_check(check_seed, perturb_grad, check_out);

        if (run->parsed()) {
            ExperimentSpec spec;
            if (!run_config_path.empty()) spec = spec_from_json(read_json_file(run_config_path));
            if (run_seed_set) spec.seed = run_seed;
            if (!run_precision.empty()) spec.precision = run_precision;
            if (!run_loss.empty()) spec.loss = blocklora::parse_loss_variant(run_loss);
            if (run_freeze) spec.freeze_down = true;
            if (run_timing) spec.timing = true;
            if (run_steps > 0) spec.steps = run_steps;
            if (run_repeats > 0) spec.repeats = run_repeats;
            return cmd_run(spec, run_out);
        }

        if (cost->parsed()) return cmd_cost(cost_k, cost_d, cost_r, cost_n, cost_m, cost_out);

        if (bound->parsed()) {
            return cmd_bound(parse_bound_inputs(bound_q, bound_sigma, bound_samples, bound_r, bound_n, bound_layers),
                             bound_out);
        }

        if (exporter->parsed()) {
            if (exp_precision == "f32") {
                return export_adapter_impl<float>(exp_k, exp_d, exp_r, exp_n, exp_seed, exp_init_std, exp_scaling,
                                                  exp_freeze, exp_out);
            }
            if (exp_precision != "f64") throw ConfigError("precision must be f32 or f64");
            return export_adapter_impl<double>(exp_k, exp_d, exp_r, exp_n, exp_seed, exp_init_std, exp_scaling,
                                               exp_freeze, exp_out);
        }

        if (importer->parsed()) {
            if (imp_precision == "f32") return import_adapter_impl<float>(imp_path);
            if (imp_precision != "f64") throw ConfigError("precision must be f32 or f64");
            return import_adapter_impl<double>(imp_path);
        }
    } catch (const blocklora::IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return 3;
    } catch (const blocklora::FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 3;
    } catch (const blocklora::EngineError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 3;
    }
    return 0;
}
