#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/costmodel.hpp"
#include "blocklora/encoder.hpp"
#include "blocklora/linalg.hpp"
#include "blocklora/losses.hpp"
#include "blocklora/rng.hpp"

namespace blocklora {

struct PropertyResult {
    std::string name;
    bool pass = false;
    double deviation = 0.0;  // worst observed deviation, check-specific meaning
    double threshold = 0.0;
    std::string detail;
};

struct PropertyOptions {
    std::uint64_t seed = 1;
    /// Added to one analytic gradient entry before the finite-difference
    /// comparison; lets callers verify that the checker actually rejects
    /// wrong gradients.
    double grad_perturbation = 0.0;
};

namespace gradcheck {

/// A small adapted dual encoder plus one support batch, used as a pure
/// function of the adapter parameters for finite differencing.
struct Scene {
    Tower<double> image;
    Tower<double> text;
    Matrix<double> support_x;
    std::vector<int> labels;
    Matrix<double> prompts;
    double temperature = 0.07;
    LossVariant variant = LossVariant::fsl_as_written;

    Scene(Tower<double> img, Tower<double> txt, Matrix<double> sx, std::vector<int> lab, Matrix<double> pr)
        : image(std::move(img)), text(std::move(txt)), support_x(std::move(sx)), labels(std::move(lab)),
          prompts(std::move(pr)) {}
};

inline Scene make_scene(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t in = 3 + rng.next_u64() % 4;      // 3..6
    const std::size_t hidden = 3 + rng.next_u64() % 4;  // 3..6
    const std::size_t embed = 2 + rng.next_u64() % 4;   // 2..5
    const bool two_layers = (rng.next_u64() % 2) == 0;
    const int n_classes = 2 + static_cast<int>(rng.next_u64() % 3);  // 2..4
    const int k_shot = 1 + static_cast<int>(rng.next_u64() % 2);     // 1..2
    const int rank = (rng.next_u64() % 2) == 0 ? 2 : 4;
    std::vector<int> divisors;
    for (int n = 1; n <= rank; ++n) {
        if (rank % n == 0) divisors.push_back(n);
    }
    const int blocks = divisors[rng.next_u64() % divisors.size()];
    const double temps[] = {0.07, 0.5, 1.0};
    const double temperature = temps[rng.next_u64() % 3];
    const LossVariant variants[] = {LossVariant::fsl_as_written, LossVariant::fsl_classwise};
    const LossVariant variant = variants[rng.next_u64() % 2];
    const bool freeze_down = (rng.next_u64() % 4) == 0;

    const std::vector<std::size_t> dims = two_layers ? std::vector<std::size_t>{in, hidden, embed}
                                                     : std::vector<std::size_t>{in, embed};
    Tower<double> image(dims, derive_seed(seed, {11}));
    Tower<double> text(dims, derive_seed(seed, {12}));

    AdapterConfig config;
    config.rank = rank;
    config.blocks = blocks;
    config.init_std = 0.05;
    config.freeze_down = freeze_down;
    config.placement.clear();
    for (std::size_t l = 0; l < dims.size() - 1; ++l) config.placement.push_back(static_cast<int>(l));

    std::vector<Tower<double>*> towers = {&image, &text};
    for (std::size_t ti = 0; ti < towers.size(); ++ti) {
        for (int layer_index : config.placement) {
            const auto& layer = towers[ti]->layer(static_cast<std::size_t>(layer_index));
            AnyAdapter<double> adapter = init_adapter<double>(
                config, layer.in_dim(), layer.out_dim(),
                derive_seed(seed, {21 + ti, static_cast<std::uint64_t>(layer_index)}));
            // Zero-initialized up-projections give zero gradients for the
            // down-projection; nudge every parameter off zero so the check
            // exercises generic values.
            for (Matrix<double>* p : trainable_params(adapter)) {
                for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.1 * rng.normal();
            }
            if (auto* block = std::get_if<BlockLoraAdapter<double>>(&adapter)) {
                // Frozen down-projections are not in trainable_params; still perturb the blocks only.
                block->refresh_up_sum();
            }
            towers[ti]->place_adapter(layer_index, std::move(adapter));
        }
    }

    const std::size_t nk = static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(k_shot);
    Matrix<double> support(nk, in);
    std::vector<int> labels(nk);
    for (std::size_t i = 0; i < nk; ++i) {
        labels[i] = static_cast<int>(i) % n_classes;
        for (std::size_t j = 0; j < in; ++j) support(i, j) = rng.normal();
    }
    Matrix<double> prompts(static_cast<std::size_t>(n_classes), in);
    for (std::size_t i = 0; i < prompts.size(); ++i) prompts.data()[i] = rng.normal();

    Scene scene(std::move(image), std::move(text), std::move(support), std::move(labels), std::move(prompts));
    scene.temperature = temperature;
    scene.variant = variant;
    return scene;
}

inline double scene_loss(Scene& scene) {
    const Matrix<double> support_emb = scene.image.encode(scene.support_x);
    const Matrix<double> class_emb = scene.text.encode(scene.prompts);
    // Loss value only; gradients are not needed here.
    return static_cast<double>(
        loss_fsl(support_emb, class_emb, scene.labels, scene.temperature, scene.variant).value);
}

struct SceneGradients {
    std::vector<Matrix<double>*> params;
    std::vector<Matrix<double>> analytic;
};

inline SceneGradients scene_gradients(Scene& scene) {
    TowerCache<double> image_cache = encode_with_cache(scene.image, scene.support_x);
    TowerCache<double> text_cache = encode_with_cache(scene.text, scene.prompts);
    LossResult<double> loss =
        loss_fsl(image_cache.output, text_cache.output, scene.labels, scene.temperature, scene.variant);
    auto image_grads = tower_backward(scene.image, image_cache, loss.grad_left);
    auto text_grads = tower_backward(scene.text, text_cache, loss.grad_right);

    SceneGradients out;
    std::vector<Tower<double>*> towers = {&scene.image, &scene.text};
    std::vector<std::map<int, AdapterGrads<double>>*> grad_maps = {&image_grads, &text_grads};
    for (std::size_t ti = 0; ti < towers.size(); ++ti) {
        for (auto& [index, adapter] : towers[ti]->adapters_mut()) {
            auto params = trainable_params(adapter);
            auto grads = gradient_list(grad_maps[ti]->at(index));
            for (std::size_t pi = 0; pi < params.size(); ++pi) {
                out.params.push_back(params[pi]);
                out.analytic.push_back(*grads[pi]);
            }
        }
    }
    return out;
}

inline void refresh_all(Scene& scene) {
    for (Tower<double>* tower : {&scene.image, &scene.text}) {
        for (auto& [index, adapter] : tower->adapters_mut()) finish_mutation(adapter);
    }
}

/// Worst relative error between analytic gradients and central finite
/// differences over every trainable parameter entry of the scene.
inline double max_fd_relative_error(Scene& scene, double h, double perturbation = 0.0) {
    SceneGradients grads = scene_gradients(scene);
    if (perturbation != 0.0 && !grads.analytic.empty() && grads.analytic.front().size() > 0) {
        grads.analytic.front().data()[0] += perturbation;
    }
    double worst = 0.0;
    for (std::size_t pi = 0; pi < grads.params.size(); ++pi) {
        Matrix<double>* param = grads.params[pi];
        for (std::size_t i = 0; i < param->size(); ++i) {
            const double saved = param->data()[i];
            param->data()[i] = saved + h;
            refresh_all(scene);
            const double plus = scene_loss(scene);
            param->data()[i] = saved - h;
            refresh_all(scene);
            const double minus = scene_loss(scene);
            param->data()[i] = saved;
            refresh_all(scene);
            const double fd = (plus - minus) / (2.0 * h);
            const double analytic = grads.analytic[pi].data()[i];
            const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-3});
            worst = std::max(worst, std::abs(fd - analytic) / denom);
        }
    }
    return worst;
}

}  // namespace gradcheck

namespace properties {

/// Max-abs deviation of the rank-partition identity over 100 seeded factor
/// pairs with k, d <= 32, r in {2, 4, 8} and every divisor block count.
inline PropertyResult block_identity(std::uint64_t seed) {
    PropertyResult result{"block-identity", false, 0.0, 1e-12, ""};
    Rng rng(seed);
    int cases = 0;
    while (cases < 100) {
        for (int r : {2, 4, 8}) {
            for (int n = 1; n <= r && cases < 100; ++n) {
                if (r % n != 0) continue;
                const std::size_t k = 2 + rng.next_u64() % 31;  // 2..32
                const std::size_t d = 2 + rng.next_u64() % 31;
                const auto down = seeded_gaussian<double>(k, static_cast<std::size_t>(r), rng.next_u64(), 1.0);
                const auto up = seeded_gaussian<double>(static_cast<std::size_t>(r), d, rng.next_u64(), 1.0);
                result.deviation = std::max(result.deviation, block_identity_check(down, up, n));
                ++cases;
            }
        }
    }
    result.detail = std::to_string(cases) + " seeded factor pairs";
    result.pass = result.deviation <= result.threshold;
    return result;
}

/// Single-block adapter against the vanilla form: identical parameters must
/// produce identical outputs, down to the last bit.
inline PropertyResult reduction_single_block(std::uint64_t seed) {
    PropertyResult result{"reduction-n1", false, 0.0, 0.0, "20 seeded cases, bitwise"};
    Rng rng(seed);
    bool bitwise = true;
    for (int c = 0; c < 20; ++c) {
        const std::size_t m = 1 + rng.next_u64() % 5;
        const std::size_t k = 2 + rng.next_u64() % 15;
        const std::size_t d = 2 + rng.next_u64() % 15;
        const std::size_t r = (rng.next_u64() % 2) ? 2 : 4;
        const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, rng.next_u64(), 0.5)};
        const auto down = seeded_gaussian<double>(k, r, rng.next_u64(), 0.1);
        const auto up = seeded_gaussian<double>(r, d, rng.next_u64(), 0.1);
        const auto x = seeded_gaussian<double>(m, k, rng.next_u64(), 1.0);
        const LoraAdapter<double> vanilla(down, up);
        const BlockLoraAdapter<double> single(down, {up});
        const auto via_vanilla = forward_lora(x, layer, vanilla);
        const auto via_block = forward_block(x, layer, single);
        result.deviation = std::max(result.deviation, max_abs_diff(via_vanilla, via_block));
        bitwise = bitwise && via_vanilla.bitwise_equal(via_block);
    }
    result.pass = bitwise && result.deviation == 0.0;
    return result;
}

/// Merged-weight forward against the adapter-path forward, exact weight
/// restoration on unmerge, and merged MAC count equal to the plain layer.
inline PropertyResult merge_equivalence(std::uint64_t seed) {
    PropertyResult result{"merge-equivalence", false, 0.0, 1e-10, ""};
    Rng rng(seed);
    bool invariants = true;
    for (int c = 0; c < 12; ++c) {
        const std::size_t m = 2 + rng.next_u64() % 4;
        const std::size_t k = 4 + rng.next_u64() % 13;
        const std::size_t d = 4 + rng.next_u64() % 13;
        const int r = (c % 2 == 0) ? 2 : 4;
        const int n_options[] = {1, 2, r};
        const int n = n_options[rng.next_u64() % 3];
        if (r % n != 0) continue;

        AdapterConfig config;
        config.rank = r;
        config.blocks = n;
        AnyAdapter<double> adapter = init_adapter<double>(config, k, d, rng.next_u64());
        for (Matrix<double>* p : trainable_params(adapter)) {
            for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.1 * rng.normal();
        }
        finish_mutation(adapter);

        const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, rng.next_u64(), 0.5)};
        const auto x = seeded_gaussian<double>(m, k, rng.next_u64(), 1.0);

        MergedLayer<double> merged = merge(layer, adapter);

        MacCounter merged_counter;
        const auto via_merged = forward_merged(x, merged, &merged_counter);
        const auto via_adapter = forward_adapted(x, layer, adapter);
        result.deviation = std::max(result.deviation, max_abs_diff(via_merged, via_adapter));

        MacCounter plain_counter;
        matmul(x, layer.weight, &plain_counter);
        invariants = invariants && merged_counter.macs() == plain_counter.macs();

        auto [restored_layer, restored_adapter] = unmerge(std::move(merged));
        invariants = invariants && restored_layer.weight.bitwise_equal(layer.weight);
    }
    result.detail = "12 seeded cases; unmerge bitwise; merged MACs = m*k*d";
    result.pass = invariants && result.deviation <= result.threshold;
    return result;
}

/// Analytic gradients against central finite differences (h = 1e-5) over
/// seeded dual-encoder scenes covering both loss variants, both adapter kinds
/// and frozen down-projections.
inline PropertyResult gradient_check(std::uint64_t seed, int scenes = 50, double perturbation = 0.0) {
    PropertyResult result{"gradient-fd", false, 0.0, 1e-5, std::to_string(scenes) + " seeded scenes, h=1e-5"};
    for (int s = 0; s < scenes; ++s) {
        gradcheck::Scene scene = gradcheck::make_scene(derive_seed(seed, {0x6764ULL, static_cast<std::uint64_t>(s)}));
        const double err = gradcheck::max_fd_relative_error(scene, 1e-5, s == 0 ? perturbation : 0.0);
        result.deviation = std::max(result.deviation, err);
    }
    result.pass = result.deviation <= result.threshold;
    return result;
}

/// All up-block gradients must be the same matrix when the down-projection is
/// shared; checked bit for bit on seeded scenes.
inline PropertyResult shared_up_grad_symmetry(std::uint64_t seed) {
    PropertyResult result{"shared-up-grad-symmetry", false, 0.0, 0.0, "bitwise over seeded scenes"};
    bool identical = true;
    for (int s = 0; s < 10; ++s) {
        gradcheck::Scene scene = gradcheck::make_scene(derive_seed(seed, {0x7379ULL, static_cast<std::uint64_t>(s)}));
        TowerCache<double> image_cache = encode_with_cache(scene.image, scene.support_x);
        TowerCache<double> text_cache = encode_with_cache(scene.text, scene.prompts);
        LossResult<double> loss =
            loss_fsl(image_cache.output, text_cache.output, scene.labels, scene.temperature, scene.variant);
        auto check_tower = [&](Tower<double>& tower, TowerCache<double>& cache, const Matrix<double>& grad) {
            auto grads = tower_backward(tower, cache, grad);
            for (const auto& [index, adapter_grads] : grads) {
                for (std::size_t b = 1; b < adapter_grads.up.size(); ++b) {
                    identical = identical && adapter_grads.up[b].bitwise_equal(adapter_grads.up.front());
                }
            }
        };
        check_tower(scene.image, image_cache, loss.grad_left);
        check_tower(scene.text, text_cache, loss.grad_right);
    }
    result.pass = identical;
    return result;
}

/// Freshly initialized adapters must not change any output.
inline PropertyResult zero_init_transparency(std::uint64_t seed) {
    PropertyResult result{"zero-init-transparency", false, 0.0, 0.0, "adapted == base at init"};
    Rng rng(seed);
    double worst = 0.0;
    for (int c = 0; c < 10; ++c) {
        const std::size_t m = 2 + rng.next_u64() % 4;
        const std::size_t k = 3 + rng.next_u64() % 10;
        const std::size_t d = 3 + rng.next_u64() % 10;
        AdapterConfig config;
        config.rank = 2;
        config.blocks = (c % 2 == 0) ? 1 : 2;
        const AnyAdapter<double> adapter = init_adapter<double>(config, k, d, rng.next_u64());
        const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, rng.next_u64(), 0.5)};
        const auto x = seeded_gaussian<double>(m, k, rng.next_u64(), 1.0);
        worst = std::max(worst, max_abs_diff(forward_adapted(x, layer, adapter), matmul(x, layer.weight)));
    }
    result.deviation = worst;
    result.pass = worst == 0.0;
    return result;
}

/// Block bound never exceeds the vanilla bound, equality exactly at n = 1,
/// plus the exact 1/sqrt(sample count) and linear-sigma scaling laws.
inline PropertyResult bound_monotonicity(std::uint64_t seed) {
    PropertyResult result{"bound-monotonicity", false, 0.0, 0.0, "1000 random inputs + scaling laws"};
    Rng rng(seed);
    bool ok = true;
    double worst = 0.0;
    for (int c = 0; c < 1000; ++c) {
        BoundInputs in;
        in.q = 1 + static_cast<int>(rng.next_u64() % 32);
        in.sigma = 0.1 + 4.0 * rng.uniform();
        in.sample_count = 1 + static_cast<long long>(rng.next_u64() % 100000);
        const int n_choices[] = {1, 2, 4, 8};
        in.n = n_choices[rng.next_u64() % 4];
        in.r = in.n * (1 + static_cast<int>(rng.next_u64() % 4));
        const int n_layers = 1 + static_cast<int>(rng.next_u64() % 4);
        for (int l = 0; l < n_layers; ++l) {
            in.layers.emplace_back(1 + static_cast<int>(rng.next_u64() % 2048),
                                   1 + static_cast<int>(rng.next_u64() % 2048));
        }
        const double lora = bound_lora(in);
        const double block = bound_block(in);
        ok = ok && block <= lora;
        if (in.n == 1) {
            ok = ok && block == lora;
        } else {
            ok = ok && block < lora;  // strict once any k_l > 0
        }

        // Quadrupling the sample count must halve both bounds exactly.
        BoundInputs scaled = in;
        scaled.sample_count = in.sample_count * 4;
        worst = std::max(worst, std::abs(bound_lora(scaled) - lora / 2.0));
        worst = std::max(worst, std::abs(bound_block(scaled) - block / 2.0));

        // Doubling sigma must double both bounds exactly.
        BoundInputs wider = in;
        wider.sigma = 2.0 * in.sigma;
        worst = std::max(worst, std::abs(bound_lora(wider) - 2.0 * lora));
        worst = std::max(worst, std::abs(bound_block(wider) - 2.0 * block));
    }
    result.deviation = worst;
    result.pass = ok && worst == 0.0;
    return result;
}

}  // namespace properties

/// The full property suite in a fixed order; used by the `check` subcommand.
inline std::vector<PropertyResult> run_property_suite(const PropertyOptions& options) {
    std::vector<PropertyResult> results;
    results.push_back(properties::block_identity(derive_seed(options.seed, {1})));
    results.push_back(properties::reduction_single_block(derive_seed(options.seed, {2})));
    results.push_back(properties::merge_equivalence(derive_seed(options.seed, {3})));
    results.push_back(properties::gradient_check(derive_seed(options.seed, {4}), 50, options.grad_perturbation));
    results.push_back(properties::shared_up_grad_symmetry(derive_seed(options.seed, {5})));
    results.push_back(properties::zero_init_transparency(derive_seed(options.seed, {6})));
    results.push_back(properties::bound_monotonicity(derive_seed(options.seed, {7})));
    return results;
}

}  // namespace blocklora
