#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/linalg.hpp"
#include "blocklora/losses.hpp"
#include "blocklora/matrix.hpp"
#include "blocklora/optim.hpp"
#include "blocklora/rng.hpp"

namespace blocklora {

/// Stack of frozen linear layers with tanh between them (none after the last)
/// and optional adapters on a subset of layers. Frozen weights are drawn once
/// from a seeded Gaussian with std 1/sqrt(fan_in) and never change; only the
/// attached adapters train.
template <typename T>
class Tower {
public:
    Tower(const std::vector<std::size_t>& dims, std::uint64_t seed) {
        if (dims.size() < 2) throw ConfigError("tower needs at least input and output dimensions");
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            const double std_dev = 1.0 / std::sqrt(static_cast<double>(dims[l]));
            layers_.push_back(
                FrozenLinear<T>{seeded_gaussian<T>(dims[l], dims[l + 1], derive_seed(seed, {l}), std_dev)});
        }
    }

    explicit Tower(std::vector<FrozenLinear<T>> layers) : layers_(std::move(layers)) {
        if (layers_.empty()) throw ConfigError("tower needs at least one layer");
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
            if (layers_[l].out_dim() != layers_[l + 1].in_dim()) {
                throw ShapeError("layer " + std::to_string(l) + " output " + layers_[l].weight.shape_str() +
                                 " does not feed layer " + std::to_string(l + 1) + " input " +
                                 layers_[l + 1].weight.shape_str());
            }
        }
    }

    std::size_t depth() const { return layers_.size(); }
    std::size_t in_dim() const { return layers_.front().in_dim(); }
    std::size_t out_dim() const { return layers_.back().out_dim(); }
    const FrozenLinear<T>& layer(std::size_t l) const { return layers_[l]; }

    const std::map<int, AnyAdapter<T>>& adapters() const { return adapters_; }
    std::map<int, AnyAdapter<T>>& adapters_mut() { return adapters_; }

    void place_adapter(int layer_index, AnyAdapter<T> adapter) {
        if (layer_index < 0 || static_cast<std::size_t>(layer_index) >= layers_.size()) {
            throw ConfigError("adapter placement index " + std::to_string(layer_index) + " outside tower depth " +
                              std::to_string(layers_.size()));
        }
        const auto& layer = layers_[static_cast<std::size_t>(layer_index)];
        const auto in = std::visit([](const auto& a) { return a.in_dim(); }, adapter);
        const auto out = std::visit([](const auto& a) { return a.out_dim(); }, adapter);
        if (in != layer.in_dim() || out != layer.out_dim()) {
            throw ShapeError("adapter " + std::to_string(in) + "->" + std::to_string(out) +
                             " does not fit layer weight " + layer.weight.shape_str());
        }
        adapters_.insert_or_assign(layer_index, std::move(adapter));
    }

    /// Forward pass; uses the merged weights when the tower is merged.
    Matrix<T> encode(const Matrix<T>& inputs, MacCounter* counter = nullptr) const {
        if (inputs.cols() != in_dim()) {
            throw ShapeError("tower input " + inputs.shape_str() + " does not match input width " +
                             std::to_string(in_dim()));
        }
        Matrix<T> h = inputs;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            if (merged_ && merged_weights_[l].has_value()) {
                h = matmul(h, *merged_weights_[l], counter);
            } else if (auto it = adapters_.find(static_cast<int>(l)); it != adapters_.end()) {
                h = forward_adapted(h, layers_[l], it->second, counter);
            } else {
                h = matmul(h, layers_[l].weight, counter);
            }
            if (l + 1 < layers_.size()) h = tanh_map(h);
        }
        return h;
    }

    /// Folds every adapter into a dense per-layer weight. The frozen weights
    /// and adapters are retained untouched, so unmerging is exact.
    void merge_adapters() {
        if (merged_) throw StateError("tower adapters are already merged");
        merged_weights_.assign(layers_.size(), std::nullopt);
        for (const auto& [index, adapter] : adapters_) {
            merged_weights_[static_cast<std::size_t>(index)] =
                merge(layers_[static_cast<std::size_t>(index)], adapter).effective;
        }
        merged_ = true;
    }

    void unmerge_adapters() {
        if (!merged_) throw StateError("tower adapters are not merged");
        merged_weights_.clear();
        merged_ = false;
    }

    bool merged() const { return merged_; }

    /// Hash over all frozen weights; training must never change it.
    std::uint64_t weights_hash() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& layer : layers_) {
            h ^= content_hash(layer.weight);
            h *= 0x100000001B3ULL;
        }
        return h;
    }

    static Matrix<T> tanh_map(const Matrix<T>& m) {
        Matrix<T> out(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = std::tanh(m.data()[i]);
        return out;
    }

private:
    std::vector<FrozenLinear<T>> layers_;
    std::map<int, AnyAdapter<T>> adapters_;
    bool merged_ = false;
    std::vector<std::optional<Matrix<T>>> merged_weights_;
};

/// Per-layer activations recorded during a forward pass, enough to run the
/// exact backward pass.
template <typename T>
struct TowerCache {
    Matrix<T> input;
    std::vector<Matrix<T>> layer_inputs;  // x fed to each layer (input or previous tanh)
    std::vector<Matrix<T>> activations;   // tanh outputs between layers
    Matrix<T> output;
};

template <typename T>
TowerCache<T> encode_with_cache(const Tower<T>& tower, const Matrix<T>& inputs) {
    if (tower.merged()) throw StateError("cannot run the training forward pass on a merged tower");
    TowerCache<T> cache;
    cache.input = inputs;
    Matrix<T> h = inputs;
    for (std::size_t l = 0; l < tower.depth(); ++l) {
        cache.layer_inputs.push_back(h);
        if (auto it = tower.adapters().find(static_cast<int>(l)); it != tower.adapters().end()) {
            h = forward_adapted(h, tower.layer(l), it->second);
        } else {
            h = matmul(h, tower.layer(l).weight);
        }
        if (l + 1 < tower.depth()) {
            h = Tower<T>::tanh_map(h);
            cache.activations.push_back(h);
        }
    }
    cache.output = h;
    return cache;
}

/// Exact gradients for every adapter in the tower given dL/d(output).
/// Frozen weights receive no gradient by construction.
template <typename T>
std::map<int, AdapterGrads<T>> tower_backward(const Tower<T>& tower, const TowerCache<T>& cache,
                                              const Matrix<T>& output_grad) {
    std::map<int, AdapterGrads<T>> grads;
    Matrix<T> upstream = output_grad;
    for (std::size_t li = tower.depth(); li-- > 0;) {
        const auto it = tower.adapters().find(static_cast<int>(li));
        const AnyAdapter<T>* adapter = (it != tower.adapters().end()) ? &it->second : nullptr;
        if (adapter) {
            grads.emplace(static_cast<int>(li), backward_adapter(upstream, cache.layer_inputs[li], *adapter));
        }
        if (li == 0) break;
        Matrix<T> input_grad = backward_input(upstream, tower.layer(li), adapter);
        // tanh' = 1 - tanh^2, using the cached activation.
        const Matrix<T>& act = cache.activations[li - 1];
        upstream = Matrix<T>(input_grad.rows(), input_grad.cols());
        for (std::size_t i = 0; i < input_grad.size(); ++i) {
            const T a = act.data()[i];
            upstream.data()[i] = input_grad.data()[i] * (T(1) - a * a);
        }
    }
    return grads;
}

/// Synthetic episodic task: class prototypes on the unit sphere, samples are
/// prototype plus isotropic Gaussian noise, and the text-tower input for a
/// class is its prototype vector. The query set is drawn once per task and
/// shared by every episode, like a held-out test split.
struct TaskConfig {
    int classes = 10;
    std::size_t input_dim = 64;
    double noise_std = 0.15;
    int queries_per_class = 200;
    std::uint64_t seed = 0;

    void validate() const {
        if (classes < 1) throw ConfigError("task needs at least one class");
        if (input_dim == 0) throw ConfigError("task input dimension must be positive");
        if (noise_std <= 0.0) throw ConfigError("task noise std must be positive");
        if (queries_per_class < 1) throw ConfigError("task needs at least one query per class");
    }
};

template <typename T>
struct LabeledBatch {
    Matrix<T> x;
    std::vector<int> y;
};

template <typename T>
class SyntheticTask {
public:
    explicit SyntheticTask(const TaskConfig& config) : config_(config) {
        config.validate();
        const auto n = static_cast<std::size_t>(config.classes);
        prototypes_ = Matrix<T>(n, config.input_dim);
        Rng proto_rng(derive_seed(config.seed, {0x70726F74ULL}));  // "prot"
        for (std::size_t c = 0; c < n; ++c) {
            double sq = 0.0;
            std::vector<double> raw(config.input_dim);
            for (auto& v : raw) {
                v = proto_rng.normal();
                sq += v * v;
            }
            const double norm = std::sqrt(sq);
            for (std::size_t j = 0; j < config.input_dim; ++j) {
                prototypes_(c, j) = static_cast<T>(raw[j] / norm);
            }
        }
        queries_ = sample(config.queries_per_class, derive_seed(config.seed, {0x71756572ULL}));  // "quer"
    }

    const TaskConfig& config() const { return config_; }
    int classes() const { return config_.classes; }

    /// One prototype row per class; also the text-tower input for that class.
    const Matrix<T>& prototypes() const { return prototypes_; }
    const Matrix<T>& prompts() const { return prototypes_; }

    const LabeledBatch<T>& queries() const { return queries_; }

    /// K samples per class, class-major order, deterministic in the seed.
    LabeledBatch<T> sample(int per_class, std::uint64_t seed) const {
        if (per_class < 1) throw ConfigError("sample count per class must be >= 1");
        const auto n = static_cast<std::size_t>(config_.classes);
        const auto k = static_cast<std::size_t>(per_class);
        LabeledBatch<T> batch{Matrix<T>(n * k, config_.input_dim), std::vector<int>(n * k)};
        Rng rng(seed);
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t s = 0; s < k; ++s) {
                const std::size_t row = c * k + s;
                for (std::size_t j = 0; j < config_.input_dim; ++j) {
                    batch.x(row, j) =
                        static_cast<T>(static_cast<double>(prototypes_(c, j)) + rng.normal(config_.noise_std));
                }
                batch.y[row] = static_cast<int>(c);
            }
        }
        return batch;
    }

private:
    TaskConfig config_;
    Matrix<T> prototypes_;
    LabeledBatch<T> queries_;
};

/// N-way K-shot episode: a fresh support set and the task's fixed query set.
template <typename T>
struct Episode {
    int n_way = 0;
    int k_shot = 0;
    LabeledBatch<T> support;
    LabeledBatch<T> query;
};

template <typename T>
Episode<T> make_episode(const SyntheticTask<T>& task, int k_shot, std::uint64_t seed) {
    if (k_shot < 1) throw ConfigError("episode needs k_shot >= 1");
    return Episode<T>{task.classes(), k_shot, task.sample(k_shot, seed), task.queries()};
}

/// Fraction of queries whose nearest class prompt (by cosine similarity) is the
/// true label, in percent. Ties resolve to the lowest class index.
template <typename T>
double evaluate_accuracy(const Tower<T>& image_tower, const Tower<T>& text_tower, const LabeledBatch<T>& batch,
                         const Matrix<T>& prompts, double temperature) {
    const Matrix<T> class_emb = text_tower.encode(prompts);
    const Matrix<T> query_emb = image_tower.encode(batch.x);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < query_emb.rows(); ++i) {
        Matrix<T> row(1, query_emb.cols());
        for (std::size_t j = 0; j < query_emb.cols(); ++j) row(0, j) = query_emb(i, j);
        const auto [probs, label] = classify(row, class_emb, temperature);
        if (label == batch.y[i]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(query_emb.rows());
}

struct TrainConfig {
    AdapterConfig adapter;
    LossVariant loss = LossVariant::fsl_as_written;
    double temperature = 0.07;
    AdamWConfig optimizer;
    int steps = 200;

    void validate() const {
        adapter.validate();
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");
        if (steps < 1) throw ConfigError("training needs steps >= 1");
        optimizer.validate();
    }
};

struct TracePoint {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct EpisodeResult {
    double final_support_loss = 0.0;
    double query_accuracy = 0.0;  // percent
    std::vector<TracePoint> trace;
};

namespace detail {

template <typename T>
double support_loss(const Tower<T>& image_tower, const Tower<T>& text_tower, const Episode<T>& episode,
                    const Matrix<T>& prompts, const TrainConfig& config, LossResult<T>* out_loss,
                    TowerCache<T>* image_cache, TowerCache<T>* text_cache) {
    TowerCache<T> ic = encode_with_cache(image_tower, episode.support.x);
    TowerCache<T> tc = encode_with_cache(text_tower, prompts);
    LossResult<T> loss = loss_fsl(ic.output, tc.output, episode.support.y, config.temperature, config.loss);
    const double value = static_cast<double>(loss.value);
    if (out_loss) *out_loss = std::move(loss);
    if (image_cache) *image_cache = std::move(ic);
    if (text_cache) *text_cache = std::move(tc);
    return value;
}

}  // namespace detail

/// Trains adapters on the episode's support set with the episodic loss, AdamW
/// and cosine-annealed learning rate, then scores the query set. Everything is
/// deterministic in (towers, episode, config, seed); the frozen tower weights
/// are never written.
///
/// Adapter placement and initialization seeds derive from `seed`; pass the
/// trained towers out through the optional pointers to inspect or merge them.
template <typename T>
EpisodeResult run_episode(const Tower<T>& base_image, const Tower<T>& base_text, const SyntheticTask<T>& task,
                          const Episode<T>& episode, const TrainConfig& config, std::uint64_t seed,
                          Tower<T>* trained_image = nullptr, Tower<T>* trained_text = nullptr) {
    config.validate();

    Tower<T> image = base_image;
    Tower<T> text = base_text;
    std::vector<Tower<T>*> towers = {&image, &text};
    for (std::size_t ti = 0; ti < towers.size(); ++ti) {
        for (int layer_index : config.adapter.placement) {
            const auto& layer = towers[ti]->layer(static_cast<std::size_t>(layer_index));
            towers[ti]->place_adapter(
                layer_index, init_adapter<T>(config.adapter, layer.in_dim(), layer.out_dim(),
                                             derive_seed(seed, {ti, static_cast<std::uint64_t>(layer_index)})));
        }
    }

    // Stable parameter order: image tower then text tower, layers ascending,
    // down-projection before up blocks.
    std::vector<Matrix<T>*> params;
    for (Tower<T>* tower : towers) {
        for (auto& [index, adapter] : tower->adapters_mut()) {
            for (Matrix<T>* p : trainable_params(adapter)) params.push_back(p);
        }
    }

    AdamW<T> optimizer(config.optimizer);
    const CosineSchedule schedule{config.optimizer.lr, config.steps};
    const Matrix<T>& prompts = task.prompts();

    EpisodeResult result;
    result.trace.reserve(static_cast<std::size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        LossResult<T> loss;
        TowerCache<T> image_cache, text_cache;
        const double value =
            detail::support_loss(image, text, episode, prompts, config, &loss, &image_cache, &text_cache);

        auto image_grads = tower_backward(image, image_cache, loss.grad_left);
        auto text_grads = tower_backward(text, text_cache, loss.grad_right);

        std::vector<const Matrix<T>*> grad_list;
        for (const auto* grads_map : {&image_grads, &text_grads}) {
            for (const auto& [index, adapter_grads] : *grads_map) {
                for (const Matrix<T>* g : gradient_list(adapter_grads)) grad_list.push_back(g);
            }
        }

        const double lr = schedule.lr_at(step);
        optimizer.step(params, grad_list, lr);
        for (Tower<T>* tower : towers) {
            for (auto& [index, adapter] : tower->adapters_mut()) finish_mutation(adapter);
        }
        result.trace.push_back(TracePoint{step, lr, value});
    }

    result.final_support_loss =
        detail::support_loss<T>(image, text, episode, prompts, config, nullptr, nullptr, nullptr);
    result.query_accuracy = evaluate_accuracy(image, text, episode.query, prompts, config.temperature);

    if (trained_image) *trained_image = std::move(image);
    if (trained_text) *trained_text = std::move(text);
    return result;
}

}  // namespace blocklora
