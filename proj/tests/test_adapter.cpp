#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <string>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/linalg.hpp"
#include "blocklora/rng.hpp"

using namespace blocklora;

namespace {

// Dense oracle: materialize W + scaling * down*up and take one product.
template <typename T>
Matrix<T> merged_weight_oracle(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& down, const Matrix<T>& up,
                               T scaling) {
    return matmul(x, add(w, scale(matmul(down, up), scaling)));
}

}  // namespace

TEST_CASE("vanilla forward: zero up-projection leaves the frozen output untouched") {
    const FrozenLinear<double> layer{seeded_gaussian<double>(8, 6, 1, 0.5)};
    const LoraAdapter<double> ad(seeded_gaussian<double>(8, 4, 2, 0.1), zeros<double>(4, 6));
    const auto x = seeded_gaussian<double>(3, 8, 3, 1.0);
    CHECK(max_abs_diff(forward_lora(x, layer, ad), matmul(x, layer.weight)) == 0.0);
}

TEST_CASE("vanilla forward: identity probe recovers W + scaling * down*up") {
    const std::size_t k = 6, d = 5;
    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 4, 0.5)};
    const auto down = seeded_gaussian<double>(k, 2, 5, 0.3);
    const auto up = seeded_gaussian<double>(2, d, 6, 0.3);
    const double scaling = 0.5;
    const LoraAdapter<double> ad(down, up, scaling);

    const auto probe = forward_lora(identity<double>(k), layer, ad);
    const auto expected = add(layer.weight, scale(matmul(down, up), scaling));
    CHECK(max_abs_diff(probe, expected) == 0.0);
}

TEST_CASE("vanilla forward matches the dense merged-weight oracle") {
    const std::size_t m = 3, k = 8, d = 6, r = 4;
    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 10, 0.5)};
    const auto down = seeded_gaussian<double>(k, r, 11, 0.2);
    const auto up = seeded_gaussian<double>(r, d, 12, 0.2);
    const auto x = seeded_gaussian<double>(m, k, 13, 1.0);
    const LoraAdapter<double> ad(down, up);
    CHECK(max_abs_diff(forward_lora(x, layer, ad), merged_weight_oracle(x, layer.weight, down, up, 1.0)) <= 1e-10);
}

TEST_CASE("forward shape errors") {
    const FrozenLinear<double> layer{seeded_gaussian<double>(8, 6, 1, 0.5)};
    const LoraAdapter<double> ad(seeded_gaussian<double>(8, 4, 2, 0.1), zeros<double>(4, 6));
    CHECK_THROWS_AS(forward_lora(seeded_gaussian<double>(3, 7, 3, 1.0), layer, ad), ShapeError);
    const LoraAdapter<double> wrong(seeded_gaussian<double>(7, 4, 2, 0.1), zeros<double>(4, 6));
    CHECK_THROWS_AS(forward_lora(seeded_gaussian<double>(3, 8, 3, 1.0), layer, wrong), ShapeError);
}

TEST_CASE("partition: single block returns factors unchanged") {
    const auto down = seeded_gaussian<double>(6, 4, 20, 1.0);
    const auto up = seeded_gaussian<double>(4, 5, 21, 1.0);
    const auto [downs, ups] = partition(down, up, 1);
    REQUIRE(downs.size() == 1);
    REQUIRE(ups.size() == 1);
    CHECK(downs[0].bitwise_equal(down));
    CHECK(ups[0].bitwise_equal(up));
}

TEST_CASE("partition round-trips bitwise and respects block order") {
    const auto down = seeded_gaussian<double>(8, 4, 22, 0.02);
    const auto up = seeded_gaussian<double>(4, 7, 23, 0.02);
    const auto [downs, ups] = partition(down, up, 2);
    CHECK(concat_cols(downs).bitwise_equal(down));
    CHECK(concat_rows(ups).bitwise_equal(up));
}

TEST_CASE("partition rejects non-divisible block counts naming r and n") {
    const auto down = seeded_gaussian<double>(6, 4, 24, 1.0);
    const auto up = seeded_gaussian<double>(4, 5, 25, 1.0);
    try {
        partition(down, up, 3);
        FAIL("expected DivisibilityError");
    } catch (const DivisibilityError& e) {
        const std::string msg = e.what();
        CHECK(msg.find('3') != std::string::npos);
        CHECK(msg.find('4') != std::string::npos);
    }
}

TEST_CASE("rank-partition identity: sum of block products equals the full product") {
    const auto down = seeded_gaussian<double>(6, 4, 30, 1.0);
    const auto up = seeded_gaussian<double>(4, 9, 31, 1.0);
    const auto [downs, ups] = partition(down, up, 2);
    Matrix<double> summed = zeros<double>(6, 9);
    for (std::size_t i = 0; i < downs.size(); ++i) summed = add(summed, matmul(downs[i], ups[i]));
    CHECK(max_abs_diff(summed, matmul(down, up)) <= 1e-12);
}

TEST_CASE("block_identity_check over 100 seeded trials stays below 1e-12") {
    Rng rng(40);
    double worst = 0.0;
    int cases = 0;
    while (cases < 100) {
        for (int r : {2, 4, 8}) {
            for (int n = 1; n <= r && cases < 100; ++n) {
                if (r % n != 0) continue;
                const std::size_t k = 2 + rng.next_u64() % 31;
                const std::size_t d = 2 + rng.next_u64() % 31;
                const auto down = seeded_gaussian<double>(k, static_cast<std::size_t>(r), rng.next_u64(), 1.0);
                const auto up = seeded_gaussian<double>(static_cast<std::size_t>(r), d, rng.next_u64(), 1.0);
                worst = std::max(worst, block_identity_check(down, up, n));
                ++cases;
            }
        }
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("block_identity_check edge cases") {
    const auto up = seeded_gaussian<double>(4, 8, 41, 1.0);
    CHECK(block_identity_check(zeros<double>(8, 4), up, 2) == 0.0);

    // One block per rank column.
    const auto down = seeded_gaussian<double>(8, 4, 42, 1.0);
    const auto up2 = seeded_gaussian<double>(4, 8, 43, 1.0);
    CHECK(block_identity_check(down, up2, 4) <= 1e-12);
}

TEST_CASE("block forward: all-zero up blocks leave the frozen output untouched") {
    const FrozenLinear<double> layer{seeded_gaussian<double>(8, 6, 50, 0.5)};
    const BlockLoraAdapter<double> ad(seeded_gaussian<double>(8, 2, 51, 0.1),
                                      {zeros<double>(2, 6), zeros<double>(2, 6)});
    const auto x = seeded_gaussian<double>(3, 8, 52, 1.0);
    CHECK(max_abs_diff(forward_block(x, layer, ad), matmul(x, layer.weight)) == 0.0);
}

TEST_CASE("single-block adapter reduces to the vanilla forward bitwise") {
    Rng rng(60);
    for (int c = 0; c < 20; ++c) {
        const std::size_t m = 1 + rng.next_u64() % 5;
        const std::size_t k = 2 + rng.next_u64() % 15;
        const std::size_t d = 2 + rng.next_u64() % 15;
        const std::size_t r = (c % 2 == 0) ? 2 : 4;
        const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, rng.next_u64(), 0.5)};
        const auto down = seeded_gaussian<double>(k, r, rng.next_u64(), 0.1);
        const auto up = seeded_gaussian<double>(r, d, rng.next_u64(), 0.1);
        const auto x = seeded_gaussian<double>(m, k, rng.next_u64(), 1.0);
        const auto via_vanilla = forward_lora(x, layer, LoraAdapter<double>(down, up));
        const auto via_block = forward_block(x, layer, BlockLoraAdapter<double>(down, {up}));
        CHECK(via_vanilla.bitwise_equal(via_block));
    }
}

TEST_CASE("block forward matches the per-block oracle") {
    const std::size_t m = 5, k = 16, d = 12, r = 4;
    const int n = 2;
    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 70, 0.5)};
    const auto shared_down = seeded_gaussian<double>(k, r / n, 71, 0.2);
    std::vector<Matrix<double>> ups = {seeded_gaussian<double>(r / n, d, 72, 0.2),
                                       seeded_gaussian<double>(r / n, d, 73, 0.2)};
    const auto x = seeded_gaussian<double>(m, k, 74, 1.0);
    const BlockLoraAdapter<double> ad(shared_down, ups);

    // Per-block route: x*W + sum_i x*(shared_down * up_i).
    Matrix<double> expected = matmul(x, layer.weight);
    for (const auto& up : ups) expected = add(expected, matmul(x, matmul(shared_down, up)));
    CHECK(max_abs_diff(forward_block(x, layer, ad), expected) <= 1e-10);
}

TEST_CASE("block adapter MAC accounting: down then up-sum products plus one-time adds") {
    const std::size_t m = 5, k = 16, d = 12;
    const int r = 4, n = 2;
    const auto shared_down = seeded_gaussian<double>(k, static_cast<std::size_t>(r / n), 80, 0.2);
    std::vector<Matrix<double>> ups(static_cast<std::size_t>(n),
                                    seeded_gaussian<double>(static_cast<std::size_t>(r / n), d, 81, 0.2));
    BlockLoraAdapter<double> ad(shared_down, ups);
    const auto x = seeded_gaussian<double>(m, k, 82, 1.0);

    MacCounter counter;
    ad.refresh_up_sum(&counter);
    adapter_delta(x, ad, &counter);
    CHECK(counter.macs() == m * k * (r / n) + m * (r / n) * d);
    CHECK(counter.adds() == static_cast<std::uint64_t>(n - 1) * (r / n) * d);
}

TEST_CASE("merge keeps the original weight and unmerge restores it bitwise") {
    const std::size_t k = 10, d = 8;
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    AnyAdapter<double> adapter = init_adapter<double>(config, k, d, 90);
    for (Matrix<double>* p : trainable_params(adapter)) {
        Rng rng(91);
        for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.1 * rng.normal();
    }
    finish_mutation(adapter);

    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 92, 0.5)};
    MergedLayer<double> merged = merge(layer, adapter);
    auto [restored, restored_adapter] = unmerge(std::move(merged));
    CHECK(restored.weight.bitwise_equal(layer.weight));

    const auto x = seeded_gaussian<double>(4, k, 93, 1.0);
    CHECK(forward_adapted(x, restored, restored_adapter).bitwise_equal(forward_adapted(x, layer, adapter)));
}

TEST_CASE("merged forward agrees with the adapter path and costs m*k*d MACs") {
    Rng rng(100);
    for (int r : {2, 4, 8}) {
        for (int n = 1; n <= r; n *= 2) {
            const std::size_t m = 3, k = 12, d = 9;
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

            const MergedLayer<double> merged = merge(layer, adapter);
            MacCounter merged_counter;
            const auto via_merged = forward_merged(x, merged, &merged_counter);
            CHECK(max_abs_diff(via_merged, forward_adapted(x, layer, adapter)) <= 1e-10);
            CHECK(merged_counter.macs() == m * k * d);  // independent of r and n
        }
    }
}

TEST_CASE("32-bit merge equivalence within 1e-4") {
    const std::size_t m = 4, k = 16, d = 12;
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    AnyAdapter<float> adapter = init_adapter<float>(config, k, d, 110);
    Rng rng(111);
    for (Matrix<float>* p : trainable_params(adapter)) {
        for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += static_cast<float>(0.1 * rng.normal());
    }
    finish_mutation(adapter);
    const FrozenLinear<float> layer{seeded_gaussian<float>(k, d, 112, 0.5)};
    const auto x = seeded_gaussian<float>(m, k, 113, 1.0);
    const MergedLayer<float> merged = merge(layer, adapter);
    CHECK(max_abs_diff(forward_merged(x, merged), forward_adapted(x, layer, adapter)) <= 1e-4);
}

TEST_CASE("init: fresh adapters are transparent and deterministic") {
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    const std::size_t k = 9, d = 7;
    const AnyAdapter<double> a1 = init_adapter<double>(config, k, d, 7);
    const AnyAdapter<double> a2 = init_adapter<double>(config, k, d, 7);

    const auto& b1 = std::get<BlockLoraAdapter<double>>(a1);
    const auto& b2 = std::get<BlockLoraAdapter<double>>(a2);
    CHECK(b1.shared_down().bitwise_equal(b2.shared_down()));
    CHECK(max_abs(b1.up_sum()) == 0.0);

    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 8, 0.5)};
    const auto x = seeded_gaussian<double>(3, k, 9, 1.0);
    CHECK(max_abs_diff(forward_adapted(x, layer, a1), matmul(x, layer.weight)) == 0.0);

    config.blocks = 1;
    const AnyAdapter<double> vanilla = init_adapter<double>(config, k, d, 7);
    CHECK(std::holds_alternative<LoraAdapter<double>>(vanilla));

    config.blocks = 3;
    CHECK_THROWS_AS(init_adapter<double>(config, k, d, 7), DivisibilityError);
}

TEST_CASE("trainable_params excludes a frozen down-projection") {
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    config.freeze_down = true;
    AnyAdapter<double> adapter = init_adapter<double>(config, 6, 5, 1);
    CHECK(trainable_params(adapter).size() == 2);  // up blocks only
    config.freeze_down = false;
    AnyAdapter<double> open = init_adapter<double>(config, 6, 5, 1);
    CHECK(trainable_params(open).size() == 3);
}

TEST_CASE("count_params reproduces the square-layer proportion row") {
    AdapterConfig config;
    config.rank = 2;
    config.blocks = 2;
    const auto counts = count_params(config, {{512, 512}});
    CHECK(counts.lora_total == 2048);
    CHECK(counts.block_total == 1536);
    CHECK(counts.proportion == 0.75);

    config.blocks = 1;
    CHECK(count_params(config, {{512, 512}}).proportion == 1.0);

    config.rank = 8;
    config.blocks = 4;
    CHECK(count_params(config, {{768, 768}}).proportion == 0.625);
}

TEST_CASE("square-layer proportion equals (1 + 1/n)/2 and drops below 1 for n > 1") {
    Rng rng(120);
    for (int n : {1, 2, 4, 8}) {
        AdapterConfig config;
        config.rank = 8;
        config.blocks = n;
        const int k = 1 + static_cast<int>(rng.next_u64() % 1024);
        const auto counts = count_params(config, {{k, k}});
        // Exact integer identity: 2n * block == (n + 1) * lora ... for k == d.
        CHECK(2LL * n * counts.block_total == (n + 1LL) * counts.lora_total);
        CHECK(counts.proportion == (1.0 + 1.0 / n) / 2.0);
        if (n > 1) CHECK(counts.proportion < 1.0);
    }
}

TEST_CASE("materialized up-block sum tracks mutations exactly") {
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    AnyAdapter<double> any = init_adapter<double>(config, 6, 5, 140);
    auto& adapter = std::get<BlockLoraAdapter<double>>(any);
    CHECK(adapter.up_sum().bitwise_equal(add(adapter.up_blocks()[0], adapter.up_blocks()[1])));

    Rng rng(141);
    for (std::size_t b = 0; b < adapter.blocks(); ++b) {
        Matrix<double>& block = adapter.up_block_mut(b);
        for (std::size_t i = 0; i < block.size(); ++i) block.data()[i] = rng.normal();
    }
    adapter.refresh_up_sum();
    CHECK(adapter.up_sum().bitwise_equal(add(adapter.up_blocks()[0], adapter.up_blocks()[1])));
}

TEST_CASE("scaling factor multiplies the update only") {
    const std::size_t k = 6, d = 5;
    const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, 130, 0.5)};
    const auto down = seeded_gaussian<double>(k, 2, 131, 0.3);
    const auto up = seeded_gaussian<double>(2, d, 132, 0.3);
    const auto x = seeded_gaussian<double>(3, k, 133, 1.0);

    const auto base = matmul(x, layer.weight);
    const auto with_unit = forward_lora(x, layer, LoraAdapter<double>(down, up, 1.0));
    const auto with_double = forward_lora(x, layer, LoraAdapter<double>(down, up, 2.0));
    const auto unit_delta = sub(with_unit, base);
    const auto double_delta = sub(with_double, base);
    CHECK(max_abs_diff(double_delta, scale(unit_delta, 2.0)) <= 1e-12);
}
