#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/linalg.hpp"

namespace blocklora {

/// Inputs of the closed-form generalization bounds. q is the storage width of
/// a tuned parameter in bits, sigma the sub-Gaussian parameter of the loss
/// (an assumption, never estimated from data), sample_count the training set
/// size, and layers the (k, d) dimensions of every adapted layer.
struct BoundInputs {
    int q = 16;
    double sigma = 1.0;
    long long sample_count = 16000;
    std::vector<std::pair<int, int>> layers;
    int r = 2;
    int n = 2;

    void validate() const {
        if (q < 1) throw ConfigError("bound input q must be a positive bit count");
        if (sigma <= 0.0) throw ConfigError("bound input sigma must be positive");
        if (sample_count < 1) throw ConfigError("bound input sample count must be positive");
        if (r < 1 || n < 1) throw ConfigError("bound inputs r and n must be positive");
        if (r % n != 0) {
            throw DivisibilityError("block count " + std::to_string(n) + " must divide rank " + std::to_string(r));
        }
        if (layers.empty()) throw ConfigError("bound inputs need at least one layer");
        for (const auto& [k, d] : layers) {
            if (k < 1 || d < 1) throw ConfigError("bound layer dimensions must be positive");
        }
    }
};

namespace detail {

inline double bound_common_factor(const BoundInputs& in) {
    return 2.0 * static_cast<double>(in.r) * static_cast<double>(in.q) * in.sigma * in.sigma * std::numbers::ln2 /
           static_cast<double>(in.sample_count);
}

}  // namespace detail

/// sqrt(2 r q sigma^2 ln2 / #S * sum_l (k_l + d_l))
inline double bound_lora(const BoundInputs& in) {
    in.validate();
    double dim_sum = 0.0;
    for (const auto& [k, d] : in.layers) dim_sum += static_cast<double>(k) + static_cast<double>(d);
    return std::sqrt(detail::bound_common_factor(in) * dim_sum);
}

/// sqrt(2 r q sigma^2 ln2 / #S * sum_l (k_l / n + d_l)); never exceeds
/// bound_lora, with equality exactly at n = 1.
inline double bound_block(const BoundInputs& in) {
    in.validate();
    double dim_sum = 0.0;
    for (const auto& [k, d] : in.layers) {
        dim_sum += static_cast<double>(k) / static_cast<double>(in.n) + static_cast<double>(d);
    }
    return std::sqrt(detail::bound_common_factor(in) * dim_sum);
}

/// Closed-form adapter-path operation counts for one k -> d layer under a
/// batch of m rows. MACs cover the two low-rank products; block_adds is the
/// one-time cost of summing the up blocks (amortized across the batch by the
/// materialized sum).
struct TheoreticalMacs {
    long long lora_macs = 0;    // m * r * (k + d)
    long long block_macs = 0;   // m * (r/n) * (k + d)
    long long block_adds = 0;   // (n - 1) * (r/n) * d
};

inline TheoreticalMacs theoretical_macs(int r, int n, int k, int d, int m) {
    if (r < 1 || n < 1 || k < 1 || d < 1 || m < 1) throw ConfigError("theoretical_macs needs positive inputs");
    if (r % n != 0) {
        throw DivisibilityError("block count " + std::to_string(n) + " must divide rank " + std::to_string(r));
    }
    TheoreticalMacs out;
    const long long block_rank = r / n;
    out.lora_macs = static_cast<long long>(m) * r * (static_cast<long long>(k) + d);
    out.block_macs = static_cast<long long>(m) * block_rank * (static_cast<long long>(k) + d);
    out.block_adds = static_cast<long long>(n - 1) * block_rank * d;
    return out;
}

/// Instrumented adapter-path operation counts: runs the low-rank update paths
/// of both adapter kinds (the shared x*W term excluded) on a seeded batch and
/// reads the counters back. The block-side counter includes the one-time
/// up-block summation as adds.
struct MeasuredAdapterCost {
    std::uint64_t lora_macs = 0;
    std::uint64_t block_macs = 0;
    std::uint64_t block_adds = 0;

    /// MACs only; batch size cancels, so this is exactly 1/n.
    double mac_ratio() const { return static_cast<double>(block_macs) / static_cast<double>(lora_macs); }

    /// (MACs + adds) / LoRA MACs; under the per-matrix convention m = d this
    /// is 1/n plus a vanishing 1/d-order term.
    double ops_ratio() const {
        return (static_cast<double>(block_macs) + static_cast<double>(block_adds)) /
               static_cast<double>(lora_macs);
    }
};

template <typename T = double>
MeasuredAdapterCost measure_adapter_cost(int r, int n, int k, int d, int m, int trials = 1,
                                         std::uint64_t seed = 20240101) {
    if (m < 1) throw ConfigError("measure_adapter_cost needs a positive batch size");
    if (trials < 1) throw ConfigError("measure_adapter_cost needs at least one trial");
    AdapterConfig vanilla_cfg;
    vanilla_cfg.rank = r;
    vanilla_cfg.blocks = 1;
    AdapterConfig block_cfg = vanilla_cfg;
    block_cfg.blocks = n;
    vanilla_cfg.validate();
    block_cfg.validate();

    const auto ku = static_cast<std::size_t>(k);
    const auto du = static_cast<std::size_t>(d);
    const Matrix<T> x = seeded_gaussian<T>(static_cast<std::size_t>(m), ku, derive_seed(seed, {1}), 1.0);

    MeasuredAdapterCost cost;
    {
        AnyAdapter<T> ad = init_adapter<T>(vanilla_cfg, ku, du, derive_seed(seed, {2}));
        MacCounter counter;
        for (int t = 0; t < trials; ++t) adapter_delta(x, ad, &counter);
        cost.lora_macs = counter.macs();
    }
    {
        // Fresh adapter so the up-block summation is part of the measurement;
        // the materialized sum amortizes it across the trials.
        const auto block_rank = static_cast<std::size_t>(block_cfg.block_rank());
        Matrix<T> shared_down = seeded_gaussian<T>(ku, block_rank, derive_seed(seed, {3}), 1.0);
        std::vector<Matrix<T>> ups;
        for (int i = 0; i < n; ++i) {
            ups.push_back(seeded_gaussian<T>(block_rank, du, derive_seed(seed, {4, static_cast<std::uint64_t>(i)}),
                                             1.0));
        }
        BlockLoraAdapter<T> ad(std::move(shared_down), std::move(ups));
        MacCounter counter;
        ad.refresh_up_sum(&counter);
        for (int t = 0; t < trials; ++t) adapter_delta(x, ad, &counter);
        cost.block_macs = counter.macs();
        cost.block_adds = counter.adds();
    }
    return cost;
}

/// Measured adapter-path MAC ratio (block / vanilla). Multiplies only, so the
/// result is independent of the batch size and the trial count.
template <typename T = double>
double measured_mac_ratio(int r, int n, int k, int d, int m, int trials = 1) {
    return measure_adapter_cost<T>(r, n, k, d, m, trials).mac_ratio();
}

/// Everything the cost/bound report needs in one place.
struct CostReport {
    long long lora_params = 0;
    long long block_params = 0;
    double param_proportion = 0.0;
    std::uint64_t lora_macs = 0;
    std::uint64_t block_macs = 0;
    double mac_ratio = 0.0;
    double ops_ratio = 0.0;
    double lora_bound = 0.0;
    double block_bound = 0.0;
    double bound_ratio = 0.0;
};

inline CostReport make_cost_report(int k, int d, int r, int n, int m, const BoundInputs& bound_inputs) {
    AdapterConfig config;
    config.rank = r;
    config.blocks = n;
    const ParamCounts params = count_params(config, {{k, d}});
    const MeasuredAdapterCost measured = measure_adapter_cost<double>(r, n, k, d, m);

    CostReport report;
    report.lora_params = params.lora_total;
    report.block_params = params.block_total;
    report.param_proportion = params.proportion;
    report.lora_macs = measured.lora_macs;
    report.block_macs = measured.block_macs;
    report.mac_ratio = measured.mac_ratio();
    report.ops_ratio = measured.ops_ratio();
    report.lora_bound = bound_lora(bound_inputs);
    report.block_bound = bound_block(bound_inputs);
    report.bound_ratio = report.block_bound / report.lora_bound;
    return report;
}

}  // namespace blocklora
