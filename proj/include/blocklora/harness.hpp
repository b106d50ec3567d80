#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "blocklora/costmodel.hpp"
#include "blocklora/encoder.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/properties.hpp"

namespace blocklora {

/// One full experiment: a synthetic task, a frozen dual encoder, and a sweep
/// over (rank, block count, shots) with repeated seeded episodes.
struct ExperimentSpec {
    std::uint64_t seed = 1234;

    // task
    int classes = 10;
    std::size_t input_dim = 64;
    double noise_std = 0.15;
    int queries_per_class = 200;

    // towers; both share the same layer dimensions. The text tower is the
    // image tower plus a seeded relative weight perturbation: zero means the
    // towers coincide (perfect pretraining alignment, strong zero-shot and
    // little to gain), large values mean unrelated towers (chance zero-shot).
    // The default leaves a systematic, learnable alignment gap for the
    // adapters to close, like a domain-shifted checkpoint.
    std::vector<std::size_t> tower_dims = {64, 64, 32};
    double tower_misalignment = 2.0;

    // sweep
    std::vector<int> r_list = {2};
    std::vector<int> n_list = {2};
    std::vector<int> k_list = {1, 2, 4, 8, 16};
    int steps = 2000;
    int repeats = 3;

    // training
    std::vector<int> placement = {0, 1};
    LossVariant loss = LossVariant::fsl_as_written;
    double temperature = 0.07;
    AdamWConfig optimizer;
    double init_std = 0.02;
    double scaling = 1.0;
    bool freeze_down = false;

    std::string precision = "f64";
    bool timing = false;  // real wall times make outputs non-reproducible; off by default

    void validate() const {
        if (repeats < 1) throw ConfigError("repeats must be >= 1");
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (r_list.empty() || k_list.empty()) throw ConfigError("sweep lists must not be empty");
        if (precision != "f64" && precision != "f32") {
            throw ConfigError("precision must be f64 or f32, got '" + precision + "'");
        }
        for (int r : r_list) {
            if (r < 1) throw ConfigError("rank must be positive");
            for (int n : n_list) {
                if (n < 1 || r % n != 0) {
                    throw DivisibilityError("sweep pair (r=" + std::to_string(r) + ", n=" + std::to_string(n) +
                                            "): block count must divide rank");
                }
            }
        }
        for (int k : k_list) {
            if (k < 1) throw ConfigError("shot counts must be positive");
        }
        TaskConfig task = task_config();
        task.validate();
        if (tower_dims.size() < 2) throw ConfigError("tower needs at least two dimensions");
        if (tower_dims.front() != input_dim) {
            throw ConfigError("tower input width " + std::to_string(tower_dims.front()) +
                              " must match task input dimension " + std::to_string(input_dim));
        }
        for (int p : placement) {
            if (p < 0 || static_cast<std::size_t>(p) + 1 >= tower_dims.size()) {
                throw ConfigError("placement index " + std::to_string(p) + " outside tower depth");
            }
        }
    }

    TaskConfig task_config() const {
        return TaskConfig{classes, input_dim, noise_std, queries_per_class, derive_seed(seed, {0x7461736BULL})};
    }

    std::uint64_t image_tower_seed() const { return derive_seed(seed, {0x746F7772ULL, 0}); }
    std::uint64_t text_tower_seed() const { return derive_seed(seed, {0x746F7772ULL, 1}); }

    /// Support sets are keyed by (K, repeat) only, so every (r, n) variant and
    /// the frozen-down ablation train on identical data.
    std::uint64_t support_seed(int k_shot, int repeat) const {
        return derive_seed(seed, {0x73757070ULL, static_cast<std::uint64_t>(k_shot),
                                  static_cast<std::uint64_t>(repeat)});
    }

    /// Adapter init is keyed by (r, n, K, repeat); the frozen-down variant
    /// reuses it so the ablation is paired.
    std::uint64_t cell_seed(int r, int n, int k_shot, int repeat) const {
        return derive_seed(seed, {0x63656C6CULL, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(n),
                                  static_cast<std::uint64_t>(k_shot), static_cast<std::uint64_t>(repeat)});
    }
};

struct ResultRow {
    int r = 0;
    int n = 0;
    int k_shot = 0;
    int repeat = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;  // percent
    double loss = 0.0;
    long long params = 0;          // trainable adapter parameters, both towers
    std::uint64_t macs = 0;        // measured adapter-path MACs for one input row
    std::uint64_t wall_ms = 0;     // 0 unless timing was requested
};

struct CellMean {
    int r = 0;
    int n = 0;
    int k_shot = 0;
    double accuracy = 0.0;
    double loss = 0.0;
};

struct SweepResult {
    std::vector<ResultRow> rows;     // sorted by (r, n, K, repeat)
    std::vector<CellMean> means;     // sorted by (r, n, K)
    double zero_shot_accuracy = 0.0; // untrained model on the fixed query set
    bool k_trend_ok = true;          // means non-decreasing in K (0.5 pt allowance)
};

namespace detail {

inline std::vector<int> effective_n_list(const ExperimentSpec& spec) {
    std::set<int> ns(spec.n_list.begin(), spec.n_list.end());
    ns.insert(1);  // vanilla baseline rows are always emitted
    return {ns.begin(), ns.end()};
}

/// Text tower for the experiment: the image tower's weights plus a seeded
/// rank-one perturbation of relative size `misalignment` per layer. A rank-one gap is
/// the regime low-rank adaptation assumes, and it is expressible by every
/// valid (r, n) adapter (block rank r/n >= 1), so fine-tuning can close it
/// regardless of the block count.
template <typename T>
Tower<T> make_text_tower(const ExperimentSpec& spec, const Tower<T>& image) {
    if (spec.tower_misalignment < 0.0) throw ConfigError("tower misalignment must be non-negative");
    std::vector<FrozenLinear<T>> layers;
    for (std::size_t l = 0; l < image.depth(); ++l) {
        const auto& w = image.layer(l).weight;
        if (spec.tower_misalignment == 0.0) {
            layers.push_back(FrozenLinear<T>{w});
            continue;
        }
        // (delta / sqrt(k)) * u v^T has the same per-entry scale as a dense
        // Gaussian perturbation with std delta / sqrt(fan_in).
        const std::uint64_t layer_seed = derive_seed(spec.text_tower_seed(), {l});
        const auto u = seeded_gaussian<T>(w.rows(), 1, derive_seed(layer_seed, {1}), 1.0);
        const auto v = seeded_gaussian<T>(1, w.cols(), derive_seed(layer_seed, {2}), 1.0);
        const T scale_factor = static_cast<T>(spec.tower_misalignment / std::sqrt(static_cast<double>(w.rows())));
        layers.push_back(FrozenLinear<T>{add(w, scale(matmul(u, v), scale_factor))});
    }
    return Tower<T>(std::move(layers));
}

/// Measured adapter-path MACs for one input row through both towers: counter
/// reading of the adapted forward minus the adapter-free forward.
template <typename T>
std::uint64_t adapter_macs_per_forward(const Tower<T>& base_image, const Tower<T>& base_text,
                                       const TrainConfig& config, std::uint64_t seed) {
    Tower<T> image = base_image;
    Tower<T> text = base_text;
    std::vector<Tower<T>*> towers = {&image, &text};
    for (std::size_t ti = 0; ti < towers.size(); ++ti) {
        for (int layer_index : config.adapter.placement) {
            const auto& layer = towers[ti]->layer(static_cast<std::size_t>(layer_index));
            towers[ti]->place_adapter(layer_index, init_adapter<T>(config.adapter, layer.in_dim(),
                                                                   layer.out_dim(), derive_seed(seed, {ti})));
        }
    }
    const Matrix<T> probe = seeded_gaussian<T>(1, base_image.in_dim(), derive_seed(seed, {0x70726FULL}), 1.0);
    MacCounter adapted, plain;
    image.encode(probe, &adapted);
    text.encode(probe, &adapted);
    base_image.encode(probe, &plain);
    base_text.encode(probe, &plain);
    return adapted.macs() - plain.macs();
}

}  // namespace detail

template <typename T>
SweepResult run_sweep(const ExperimentSpec& spec) {
    spec.validate();

    const SyntheticTask<T> task(spec.task_config());
    const Tower<T> image(spec.tower_dims, spec.image_tower_seed());
    const Tower<T> text = detail::make_text_tower(spec, image);
    if (image.out_dim() != text.out_dim()) throw ConfigError("tower embedding widths differ");

    SweepResult result;
    result.zero_shot_accuracy = evaluate_accuracy(image, text, task.queries(), task.prompts(), spec.temperature);

    std::vector<int> n_values = detail::effective_n_list(spec);
    std::vector<int> r_values = spec.r_list;
    std::sort(r_values.begin(), r_values.end());
    r_values.erase(std::unique(r_values.begin(), r_values.end()), r_values.end());
    std::vector<int> k_values = spec.k_list;
    std::sort(k_values.begin(), k_values.end());
    k_values.erase(std::unique(k_values.begin(), k_values.end()), k_values.end());

    std::map<std::tuple<int, int, int>, std::pair<double, double>> sums;

    for (int r : r_values) {
        for (int n : n_values) {
            if (r % n != 0) {
                throw DivisibilityError("sweep pair (r=" + std::to_string(r) + ", n=" + std::to_string(n) +
                                        "): block count must divide rank");
            }
            TrainConfig config;
            config.adapter.rank = r;
            config.adapter.blocks = n;
            config.adapter.placement = spec.placement;
            config.adapter.init_std = spec.init_std;
            config.adapter.scaling = spec.scaling;
            config.adapter.freeze_down = spec.freeze_down;
            config.loss = spec.loss;
            config.temperature = spec.temperature;
            config.optimizer = spec.optimizer;
            config.steps = spec.steps;

            // Trainable parameter count over both towers.
            long long params = 0;
            for (int layer_index : spec.placement) {
                const long long k_dim = static_cast<long long>(spec.tower_dims[static_cast<std::size_t>(layer_index)]);
                const long long d_dim =
                    static_cast<long long>(spec.tower_dims[static_cast<std::size_t>(layer_index) + 1]);
                long long per_layer = static_cast<long long>(r) * d_dim;  // up blocks
                if (!spec.freeze_down) per_layer += (static_cast<long long>(r) / n) * k_dim;
                params += 2 * per_layer;
            }

            const std::uint64_t cell_macs =
                detail::adapter_macs_per_forward(image, text, config, derive_seed(spec.seed, {0x6D616373ULL}));

            for (int k_shot : k_values) {
                for (int repeat = 0; repeat < spec.repeats; ++repeat) {
                    const std::uint64_t row_seed = spec.cell_seed(r, n, k_shot, repeat);
                    const Episode<T> episode = make_episode(task, k_shot, spec.support_seed(k_shot, repeat));

                    const auto start = std::chrono::steady_clock::now();
                    const EpisodeResult episode_result = run_episode(image, text, task, episode, config, row_seed);
                    const auto elapsed = std::chrono::steady_clock::now() - start;

                    ResultRow row;
                    row.r = r;
                    row.n = n;
                    row.k_shot = k_shot;
                    row.repeat = repeat;
                    row.seed = row_seed;
                    row.accuracy = episode_result.query_accuracy;
                    row.loss = episode_result.final_support_loss;
                    row.params = params;
                    row.macs = cell_macs;
                    if (spec.timing) {
                        row.wall_ms = static_cast<std::uint64_t>(
                            std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count());
                    }
                    result.rows.push_back(row);

                    auto& [acc_sum, loss_sum] = sums[{r, n, k_shot}];
                    acc_sum += row.accuracy;
                    loss_sum += row.loss;
                }
            }
        }
    }

    for (const auto& [key, value] : sums) {
        const auto& [r, n, k_shot] = key;
        result.means.push_back(CellMean{r, n, k_shot, value.first / spec.repeats, value.second / spec.repeats});
    }

    // Shot-count trend: per (r, n), means must be non-decreasing in K up to a
    // 0.5-point allowance between adjacent shot counts.
    for (int r : r_values) {
        for (int n : n_values) {
            double previous = -1.0;
            for (int k_shot : k_values) {
                const auto it = sums.find({r, n, k_shot});
                if (it == sums.end()) continue;
                const double mean = it->second.first / spec.repeats;
                if (previous >= 0.0 && mean < previous - 0.5) result.k_trend_ok = false;
                previous = mean;
            }
        }
    }
    return result;
}

inline SweepResult run_sweep_dispatch(const ExperimentSpec& spec) {
    return spec.precision == "f32" ? run_sweep<float>(spec) : run_sweep<double>(spec);
}

inline constexpr const char* kResultCsvHeader = "r,n,K,repeat,seed,accuracy,loss,params,macs,wall_ms";

/// Fixed-format CSV; identical specs produce byte-identical text (wall_ms is 0
/// unless timing was requested, which is the one non-reproducible column).
inline std::string format_result_csv(const std::vector<ResultRow>& rows) {
    std::string out(kResultCsvHeader);
    out.push_back('\n');
    char buffer[256];
    for (const ResultRow& row : rows) {
        std::snprintf(buffer, sizeof(buffer), "%d,%d,%d,%d,%llu,%.4f,%.10g,%lld,%llu,%llu\n", row.r, row.n,
                      row.k_shot, row.repeat, static_cast<unsigned long long>(row.seed), row.accuracy, row.loss,
                      row.params, static_cast<unsigned long long>(row.macs),
                      static_cast<unsigned long long>(row.wall_ms));
        out += buffer;
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace blocklora
