#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "blocklora/errors.hpp"
#include "blocklora/linalg.hpp"
#include "blocklora/matrix.hpp"

namespace blocklora {

/// Adapter hyperparameters. `blocks == 1` selects the vanilla low-rank form;
/// `blocks > 1` selects the block form with one shared down-projection.
struct AdapterConfig {
    int rank = 2;
    int blocks = 2;
    std::vector<int> placement = {0, 1};  // layer indices that receive adapters
    double init_std = 0.02;
    bool freeze_down = false;  // keep the down-projection at its random init
    double scaling = 1.0;

    void validate() const {
        if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
        if (blocks < 1) throw ConfigError("adapter block count must be >= 1, got " + std::to_string(blocks));
        if (rank % blocks != 0) {
            throw DivisibilityError("block count " + std::to_string(blocks) + " must divide rank " +
                                    std::to_string(rank));
        }
        if (init_std <= 0.0) throw ConfigError("init_std must be positive");
        if (scaling <= 0.0) throw ConfigError("scaling must be positive");
    }

    int block_rank() const { return rank / blocks; }
};

/// A linear layer whose weight never changes during training.
template <typename T>
struct FrozenLinear {
    Matrix<T> weight;  // k x d

    std::size_t in_dim() const { return weight.rows(); }
    std::size_t out_dim() const { return weight.cols(); }
};

/// Vanilla low-rank adapter: update = down (k x r) * up (r x d).
template <typename T>
class LoraAdapter {
public:
    LoraAdapter(Matrix<T> down, Matrix<T> up, T scaling = T(1), bool freeze_down = false)
        : down_(std::move(down)), up_(std::move(up)), scaling_(scaling), freeze_down_(freeze_down) {
        if (down_.cols() != up_.rows()) {
            throw ShapeError("adapter rank mismatch: down " + down_.shape_str() + " vs up " + up_.shape_str());
        }
    }

    const Matrix<T>& down() const { return down_; }
    const Matrix<T>& up() const { return up_; }
    T scaling() const { return scaling_; }
    bool freeze_down() const { return freeze_down_; }

    std::size_t rank() const { return down_.cols(); }
    std::size_t in_dim() const { return down_.rows(); }
    std::size_t out_dim() const { return up_.cols(); }

    Matrix<T> delta_weight() const { return scale(matmul(down_, up_), scaling_); }

    // Mutable access for training; the caller holds exclusive access.
    Matrix<T>& down_mut() { return down_; }
    Matrix<T>& up_mut() { return up_; }

private:
    Matrix<T> down_;
    Matrix<T> up_;
    T scaling_;
    bool freeze_down_;
};

/// Block adapter: one shared down-projection (k x r/n) and n up-projection
/// blocks (each r/n x d). The effective update is shared_down * sum(up blocks).
/// The block sum is kept materialized so the forward path is read-only; every
/// mutation goes through a method that refreshes it.
template <typename T>
class BlockLoraAdapter {
public:
    BlockLoraAdapter(Matrix<T> shared_down, std::vector<Matrix<T>> up_blocks, T scaling = T(1),
                     bool freeze_down = false)
        : shared_down_(std::move(shared_down)),
          up_blocks_(std::move(up_blocks)),
          scaling_(scaling),
          freeze_down_(freeze_down) {
        if (up_blocks_.empty()) throw ShapeError("block adapter needs at least one up-projection block");
        for (const auto& blk : up_blocks_) {
            if (blk.rows() != shared_down_.cols() || blk.cols() != up_blocks_.front().cols()) {
                throw ShapeError("block shape mismatch: shared down " + shared_down_.shape_str() + " vs block " +
                                 blk.shape_str());
            }
        }
        refresh_up_sum();
    }

    const Matrix<T>& shared_down() const { return shared_down_; }
    const std::vector<Matrix<T>>& up_blocks() const { return up_blocks_; }
    const Matrix<T>& up_sum() const { return up_sum_; }
    T scaling() const { return scaling_; }
    bool freeze_down() const { return freeze_down_; }

    std::size_t blocks() const { return up_blocks_.size(); }
    std::size_t block_rank() const { return shared_down_.cols(); }
    std::size_t rank() const { return block_rank() * blocks(); }
    std::size_t in_dim() const { return shared_down_.rows(); }
    std::size_t out_dim() const { return up_blocks_.front().cols(); }

    Matrix<T> delta_weight() const { return scale(matmul(shared_down_, up_sum_), scaling_); }

    Matrix<T>& shared_down_mut() { return shared_down_; }
    Matrix<T>& up_block_mut(std::size_t i) { return up_blocks_[i]; }

    /// Recomputes the materialized block sum; must be called after mutating any
    /// up block, before the adapter is read again. Records the (n-1) * (r/n) * d
    /// elementwise adds when a counter is given.
    void refresh_up_sum(MacCounter* counter = nullptr) {
        Matrix<T> sum = up_blocks_.front();
        for (std::size_t i = 1; i < up_blocks_.size(); ++i) {
            sum = add(sum, up_blocks_[i], counter);
        }
        up_sum_ = std::move(sum);
    }

private:
    Matrix<T> shared_down_;
    std::vector<Matrix<T>> up_blocks_;
    Matrix<T> up_sum_;
    T scaling_;
    bool freeze_down_;
};

template <typename T>
using AnyAdapter = std::variant<LoraAdapter<T>, BlockLoraAdapter<T>>;

namespace detail {

template <typename T>
void check_forward_shapes(const Matrix<T>& x, const FrozenLinear<T>& layer, std::size_t adapter_in,
                          std::size_t adapter_out) {
    if (x.cols() != layer.in_dim()) {
        throw ShapeError("input " + x.shape_str() + " does not match layer weight " + layer.weight.shape_str());
    }
    if (adapter_in != layer.in_dim() || adapter_out != layer.out_dim()) {
        throw ShapeError("adapter dims " + std::to_string(adapter_in) + "->" + std::to_string(adapter_out) +
                         " do not match layer weight " + layer.weight.shape_str());
    }
}

}  // namespace detail

/// Low-rank contribution scaling * (x * down) * up, without the frozen term.
/// Both adapter kinds use the identical evaluation order, which is what makes
/// the single-block reduction bit-exact.
template <typename T>
Matrix<T> adapter_delta(const Matrix<T>& x, const LoraAdapter<T>& ad, MacCounter* counter = nullptr) {
    return scale(matmul(matmul(x, ad.down(), counter), ad.up(), counter), ad.scaling());
}

template <typename T>
Matrix<T> adapter_delta(const Matrix<T>& x, const BlockLoraAdapter<T>& ad, MacCounter* counter = nullptr) {
    return scale(matmul(matmul(x, ad.shared_down(), counter), ad.up_sum(), counter), ad.scaling());
}

template <typename T>
Matrix<T> adapter_delta(const Matrix<T>& x, const AnyAdapter<T>& ad, MacCounter* counter = nullptr) {
    return std::visit([&](const auto& a) { return adapter_delta(x, a, counter); }, ad);
}

/// x * W + scaling * (x * down) * up.
template <typename T>
Matrix<T> forward_lora(const Matrix<T>& x, const FrozenLinear<T>& layer, const LoraAdapter<T>& ad,
                       MacCounter* counter = nullptr) {
    detail::check_forward_shapes(x, layer, ad.in_dim(), ad.out_dim());
    return add(matmul(x, layer.weight, counter), adapter_delta(x, ad, counter));
}

/// x * W + scaling * (x * shared_down) * sum(up blocks).
template <typename T>
Matrix<T> forward_block(const Matrix<T>& x, const FrozenLinear<T>& layer, const BlockLoraAdapter<T>& ad,
                        MacCounter* counter = nullptr) {
    detail::check_forward_shapes(x, layer, ad.in_dim(), ad.out_dim());
    return add(matmul(x, layer.weight, counter), adapter_delta(x, ad, counter));
}

template <typename T>
Matrix<T> forward_adapted(const Matrix<T>& x, const FrozenLinear<T>& layer, const AnyAdapter<T>& ad,
                          MacCounter* counter = nullptr) {
    return std::visit([&](const auto& a) { return add(matmul(x, layer.weight, counter), adapter_delta(x, a, counter)); },
                      ad);
}

/// Splits a (k x r, r x d) factor pair into n rank-(r/n) column/row blocks.
template <typename T>
std::pair<std::vector<Matrix<T>>, std::vector<Matrix<T>>> partition(const Matrix<T>& down, const Matrix<T>& up,
                                                                    int n) {
    if (down.cols() != up.rows()) {
        throw ShapeError("partition rank mismatch: down " + down.shape_str() + " vs up " + up.shape_str());
    }
    const int r = static_cast<int>(down.cols());
    if (n < 1 || r % n != 0) {
        throw DivisibilityError("block count " + std::to_string(n) + " must divide rank " + std::to_string(r));
    }
    return {split_cols(down, static_cast<std::size_t>(n)), split_rows(up, static_cast<std::size_t>(n))};
}

/// Max-abs deviation between the full product down*up and the sum of the n
/// per-block products. Mathematically zero; numerically a reassociation bound.
template <typename T>
double block_identity_check(const Matrix<T>& down, const Matrix<T>& up, int n) {
    auto [down_blocks, up_blocks] = partition(down, up, n);
    const Matrix<T> full = matmul(down, up);
    Matrix<T> summed = zeros<T>(full.rows(), full.cols());
    for (std::size_t i = 0; i < down_blocks.size(); ++i) {
        summed = add(summed, matmul(down_blocks[i], up_blocks[i]));
    }
    return max_abs_diff(full, summed);
}

/// A layer with the adapter folded into a single dense weight. Keeps the
/// original weight and the adapter so unmerging restores both exactly instead
/// of subtracting the update back out.
template <typename T>
struct MergedLayer {
    Matrix<T> effective;       // W + scaling * delta
    FrozenLinear<T> original;  // retained copy, returned bitwise by unmerge
    AnyAdapter<T> adapter;     // retained unchanged
};

template <typename T>
MergedLayer<T> merge(const FrozenLinear<T>& layer, const AnyAdapter<T>& ad) {
    const Matrix<T> delta = std::visit([](const auto& a) { return a.delta_weight(); }, ad);
    if (!delta.same_shape(layer.weight)) {
        throw ShapeError("adapter update " + delta.shape_str() + " does not match layer weight " +
                         layer.weight.shape_str());
    }
    return MergedLayer<T>{add(layer.weight, delta), layer, ad};
}

/// Single dense product through the merged weight: same MAC cost as the
/// adapter-free layer, independent of rank and block count.
template <typename T>
Matrix<T> forward_merged(const Matrix<T>& x, const MergedLayer<T>& layer, MacCounter* counter = nullptr) {
    return matmul(x, layer.effective, counter);
}

template <typename T>
std::pair<FrozenLinear<T>, AnyAdapter<T>> unmerge(MergedLayer<T> layer) {
    return {std::move(layer.original), std::move(layer.adapter)};
}

/// Builds a fresh adapter for a k -> d layer: Gaussian down-projection, zero
/// up-projection, so the update starts at exactly zero. blocks == 1 yields the
/// vanilla form.
template <typename T>
AnyAdapter<T> init_adapter(const AdapterConfig& config, std::size_t k, std::size_t d, std::uint64_t seed) {
    config.validate();
    const auto block_rank = static_cast<std::size_t>(config.block_rank());
    if (config.blocks == 1) {
        return LoraAdapter<T>(seeded_gaussian<T>(k, static_cast<std::size_t>(config.rank), seed, config.init_std),
                              zeros<T>(static_cast<std::size_t>(config.rank), d), static_cast<T>(config.scaling),
                              config.freeze_down);
    }
    std::vector<Matrix<T>> up_blocks(static_cast<std::size_t>(config.blocks), zeros<T>(block_rank, d));
    return BlockLoraAdapter<T>(seeded_gaussian<T>(k, block_rank, seed, config.init_std), std::move(up_blocks),
                               static_cast<T>(config.scaling), config.freeze_down);
}

/// Gradients of a scalar loss with respect to the adapter parameters:
/// one matrix for the down-projection, one per up-projection block. With a
/// shared down-projection all up-block gradients are the same matrix.
template <typename T>
struct AdapterGrads {
    Matrix<T> down;                // zero matrix when the down-projection is frozen
    std::vector<Matrix<T>> up;     // size 1 for vanilla, n for the block form
    bool down_frozen = false;
};

/// Exact gradients of the adapted forward: given dL/dh for h = x*W + scaling*(x*down)*up,
///   dL/down = x^T * dL/dh * up_sum^T * scaling
///   dL/up_i = (x * down)^T * dL/dh * scaling        (identical for every block)
/// A frozen down-projection receives a zero gradient.
template <typename T>
AdapterGrads<T> backward_adapter(const Matrix<T>& upstream, const Matrix<T>& x, const LoraAdapter<T>& ad) {
    if (upstream.rows() != x.rows() || upstream.cols() != ad.out_dim() || x.cols() != ad.in_dim()) {
        throw ShapeError("backward_adapter shape mismatch: upstream " + upstream.shape_str() + ", x " +
                         x.shape_str());
    }
    AdapterGrads<T> grads;
    grads.down_frozen = ad.freeze_down();
    // Low-rank association: x^T * (dH * up^T) keeps every intermediate at rank r.
    grads.down = ad.freeze_down()
                     ? zeros<T>(ad.down().rows(), ad.down().cols())
                     : scale(matmul(transpose(x), matmul(upstream, transpose(ad.up()))), ad.scaling());
    grads.up.push_back(scale(matmul(transpose(matmul(x, ad.down())), upstream), ad.scaling()));
    return grads;
}

template <typename T>
AdapterGrads<T> backward_adapter(const Matrix<T>& upstream, const Matrix<T>& x, const BlockLoraAdapter<T>& ad) {
    if (upstream.rows() != x.rows() || upstream.cols() != ad.out_dim() || x.cols() != ad.in_dim()) {
        throw ShapeError("backward_adapter shape mismatch: upstream " + upstream.shape_str() + ", x " +
                         x.shape_str());
    }
    AdapterGrads<T> grads;
    grads.down_frozen = ad.freeze_down();
    grads.down = ad.freeze_down()
                     ? zeros<T>(ad.shared_down().rows(), ad.shared_down().cols())
                     : scale(matmul(transpose(x), matmul(upstream, transpose(ad.up_sum()))), ad.scaling());
    const Matrix<T> shared_up_grad = scale(matmul(transpose(matmul(x, ad.shared_down())), upstream), ad.scaling());
    grads.up.assign(ad.blocks(), shared_up_grad);
    return grads;
}

template <typename T>
AdapterGrads<T> backward_adapter(const Matrix<T>& upstream, const Matrix<T>& x, const AnyAdapter<T>& ad) {
    return std::visit([&](const auto& a) { return backward_adapter(upstream, x, a); }, ad);
}

/// dL/dx for the adapted forward, using the low-rank route for the update term:
/// dL/dx = dL/dh * W^T + scaling * (dL/dh * up_sum^T) * down^T.
template <typename T>
Matrix<T> backward_input(const Matrix<T>& upstream, const FrozenLinear<T>& layer, const AnyAdapter<T>* ad) {
    Matrix<T> grad = matmul(upstream, transpose(layer.weight));
    if (ad == nullptr) return grad;
    return std::visit(
        [&](const auto& a) {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, LoraAdapter<T>>) {
                return add(grad, scale(matmul(matmul(upstream, transpose(a.up())), transpose(a.down())),
                                       a.scaling()));
            } else {
                return add(grad, scale(matmul(matmul(upstream, transpose(a.up_sum())), transpose(a.shared_down())),
                                       a.scaling()));
            }
        },
        *ad);
}

// --- uniform accessors over the two adapter kinds ---

template <typename T>
std::size_t adapter_rank(const AnyAdapter<T>& ad) {
    return std::visit([](const auto& a) { return a.rank(); }, ad);
}

template <typename T>
std::size_t adapter_blocks(const AnyAdapter<T>& ad) {
    return std::visit(
        [](const auto& a) -> std::size_t {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, LoraAdapter<T>>) return 1;
            else return a.blocks();
        },
        ad);
}

template <typename T>
bool adapter_freezes_down(const AnyAdapter<T>& ad) {
    return std::visit([](const auto& a) { return a.freeze_down(); }, ad);
}

/// Pointers to the trainable parameter matrices, in a fixed order:
/// down-projection first (unless frozen), then the up blocks.
template <typename T>
std::vector<Matrix<T>*> trainable_params(AnyAdapter<T>& ad) {
    std::vector<Matrix<T>*> out;
    if (auto* lora = std::get_if<LoraAdapter<T>>(&ad)) {
        if (!lora->freeze_down()) out.push_back(&lora->down_mut());
        out.push_back(&lora->up_mut());
        return out;
    }
    auto& block = std::get<BlockLoraAdapter<T>>(ad);
    if (!block.freeze_down()) out.push_back(&block.shared_down_mut());
    for (std::size_t i = 0; i < block.blocks(); ++i) out.push_back(&block.up_block_mut(i));
    return out;
}

/// Gradient matrices in the same order as trainable_params().
template <typename T>
std::vector<const Matrix<T>*> gradient_list(const AdapterGrads<T>& grads) {
    std::vector<const Matrix<T>*> out;
    if (!grads.down_frozen) out.push_back(&grads.down);
    for (const auto& g : grads.up) out.push_back(&g);
    return out;
}

/// Re-establishes internal invariants after in-place parameter mutation.
template <typename T>
void finish_mutation(AnyAdapter<T>& ad, MacCounter* counter = nullptr) {
    if (auto* block = std::get_if<BlockLoraAdapter<T>>(&ad)) block->refresh_up_sum(counter);
}

/// Trainable parameter counts for one k -> d layer.
struct ParamCounts {
    long long lora_total = 0;   // r * (k + d)
    long long block_total = 0;  // (r/n) * k + r * d
    double proportion = 0.0;    // block / lora
};

/// Sums r*(k+d) against (r/n)*k + r*d over the given layer dimensions.
/// For square layers the proportion is exactly (1 + 1/n) / 2.
inline ParamCounts count_params(const AdapterConfig& config, const std::vector<std::pair<int, int>>& layer_dims) {
    config.validate();
    if (layer_dims.empty()) throw ConfigError("count_params needs at least one layer");
    ParamCounts counts;
    for (const auto& [k, d] : layer_dims) {
        if (k < 1 || d < 1) throw ConfigError("layer dimensions must be positive");
        counts.lora_total += static_cast<long long>(config.rank) * (k + d);
        counts.block_total += static_cast<long long>(config.block_rank()) * k +
                              static_cast<long long>(config.rank) * d;
    }
    counts.proportion = static_cast<double>(counts.block_total) / static_cast<double>(counts.lora_total);
    return counts;
}

}  // namespace blocklora
