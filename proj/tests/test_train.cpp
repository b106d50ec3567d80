#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/losses.hpp"
#include "blocklora/optim.hpp"
#include "blocklora/rng.hpp"

using namespace blocklora;

namespace {

// Central finite differences of a scalar function over one matrix argument.
Matrix<double> fd_gradient(const std::function<double(const Matrix<double>&)>& f, Matrix<double> point, double h) {
    Matrix<double> grad(point.rows(), point.cols());
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point.data()[i];
        point.data()[i] = saved + h;
        const double plus = f(point);
        point.data()[i] = saved - h;
        const double minus = f(point);
        point.data()[i] = saved;
        grad.data()[i] = (plus - minus) / (2.0 * h);
    }
    return grad;
}

double max_rel_error(const Matrix<double>& analytic, const Matrix<double>& reference) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data()[i];
        const double b = reference.data()[i];
        worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}));
    }
    return worst;
}

}  // namespace

TEST_CASE("contrastive loss flattens to ln(m) at large temperature") {
    const auto v = seeded_gaussian<double>(4, 6, 1, 1.0);
    const auto result = loss_contrastive(v, v, 1e4);
    CHECK(std::abs(result.value - std::log(4.0)) <= 1e-3);
}

TEST_CASE("contrastive loss on orthonormal pairs matches the hand-evaluated softmax") {
    // v1 = t1 = e1, v2 = t2 = e2: similarity matrix [[1,0],[0,1]] exactly.
    const auto v = Matrix<double>::from_rows({{1, 0, 0}, {0, 1, 0}});
    const auto result = loss_contrastive(v, v, 1.0);
    // Per pair: -ln(e / (e + 1)) = ln(1 + exp(-1)).
    const double expected = std::log1p(std::exp(-1.0));
    CHECK(std::abs(result.value - expected) <= 1e-14);
}

TEST_CASE("contrastive loss rejects bad inputs") {
    const auto v = seeded_gaussian<double>(4, 6, 2, 1.0);
    CHECK_THROWS_AS(loss_contrastive(v, v, 0.0), ConfigError);
    CHECK_THROWS_AS(loss_contrastive(v, v, -1.0), ConfigError);
    CHECK_THROWS_AS(loss_contrastive(seeded_gaussian<double>(1, 6, 3, 1.0), seeded_gaussian<double>(1, 6, 4, 1.0), 1.0),
                    ConfigError);
    auto degenerate = v;
    for (std::size_t j = 0; j < degenerate.cols(); ++j) degenerate(1, j) = 0.0;
    CHECK_THROWS_AS(loss_contrastive(degenerate, v, 1.0), DegenerateEmbeddingError);
}

TEST_CASE("contrastive gradients match central finite differences") {
    Rng rng(10);
    for (int c = 0; c < 5; ++c) {
        const std::size_t m = 2 + rng.next_u64() % 3;
        const std::size_t e = 3 + rng.next_u64() % 4;
        const auto v = seeded_gaussian<double>(m, e, rng.next_u64(), 1.0);
        const auto t = seeded_gaussian<double>(m, e, rng.next_u64(), 1.0);
        const double temperature = (c % 2 == 0) ? 0.07 : 0.8;

        const auto result = loss_contrastive(v, t, temperature);
        const auto fd_v = fd_gradient(
            [&](const Matrix<double>& p) { return static_cast<double>(loss_contrastive(p, t, temperature).value); },
            v, 1e-5);
        const auto fd_t = fd_gradient(
            [&](const Matrix<double>& p) { return static_cast<double>(loss_contrastive(v, p, temperature).value); },
            t, 1e-5);
        CHECK(max_rel_error(result.grad_left, fd_v) <= 1e-5);
        CHECK(max_rel_error(result.grad_right, fd_t) <= 1e-5);
    }
}

TEST_CASE("loss is invariant to positive rescaling of embedding rows") {
    const auto v = seeded_gaussian<double>(4, 6, 20, 1.0);
    const auto t = seeded_gaussian<double>(4, 6, 21, 1.0);
    const double base = static_cast<double>(loss_contrastive(v, t, 0.07).value);
    for (double factor : {0.5, 3.0}) {
        auto scaled = v;
        for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(2, j) *= factor;
        CHECK(std::abs(static_cast<double>(loss_contrastive(scaled, t, 0.07).value) - base) <= 1e-10);
    }
}

TEST_CASE("classwise episodic loss: single class costs exactly zero") {
    const auto support = seeded_gaussian<double>(3, 5, 30, 1.0);
    const auto prompts = seeded_gaussian<double>(1, 5, 31, 1.0);
    const auto result = loss_fsl(support, prompts, {0, 0, 0}, 1.0, LossVariant::fsl_classwise);
    CHECK(result.value == 0.0);
}

TEST_CASE("classwise episodic loss matches the hand-evaluated two-class softmax") {
    // Orthonormal embeddings: similarities [[1,0],[0,1]] exactly.
    const auto support = Matrix<double>::from_rows({{1, 0, 0}, {0, 1, 0}});
    const auto prompts = Matrix<double>::from_rows({{1, 0, 0}, {0, 1, 0}});
    const auto result = loss_fsl(support, prompts, {0, 1}, 1.0, LossVariant::fsl_classwise);
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(std::abs(result.value - expected) <= 1e-14);
}

TEST_CASE("episodic loss rejects out-of-range labels") {
    const auto support = seeded_gaussian<double>(4, 5, 40, 1.0);
    const auto prompts = seeded_gaussian<double>(2, 5, 41, 1.0);
    CHECK_THROWS_AS(loss_fsl(support, prompts, {0, 1, 2, 0}, 1.0, LossVariant::fsl_classwise), LabelError);
    CHECK_THROWS_AS(loss_fsl(support, prompts, {0, 1, -1, 0}, 1.0, LossVariant::fsl_as_written), LabelError);
}

TEST_CASE("as-written episodic loss: denominator spans all N*K support texts") {
    // N = 2, K = 2: every class prompt appears twice in the denominator, so
    // even a perfectly aligned support row pays more than the classwise loss.
    const auto support = Matrix<double>::from_rows({{1, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 1, 0}});
    const auto prompts = Matrix<double>::from_rows({{1, 0, 0}, {0, 1, 0}});
    const std::vector<int> labels = {0, 0, 1, 1};

    const auto as_written = loss_fsl(support, prompts, labels, 1.0, LossVariant::fsl_as_written);
    // Hand evaluation per row: -ln(e / (2e + 2)) = ln(2 + 2/e).
    const double expected = std::log(2.0 + 2.0 * std::exp(-1.0));
    CHECK(std::abs(as_written.value - expected) <= 1e-14);

    const auto classwise = loss_fsl(support, prompts, labels, 1.0, LossVariant::fsl_classwise);
    CHECK(as_written.value > classwise.value);
}

TEST_CASE("episodic loss gradients match central finite differences in both variants") {
    Rng rng(50);
    for (LossVariant variant : {LossVariant::fsl_as_written, LossVariant::fsl_classwise}) {
        for (int c = 0; c < 4; ++c) {
            const int n_classes = 2 + static_cast<int>(rng.next_u64() % 3);
            const int k_shot = 1 + static_cast<int>(rng.next_u64() % 2);
            const std::size_t e = 3 + rng.next_u64() % 3;
            const std::size_t nk = static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(k_shot);
            const auto support = seeded_gaussian<double>(nk, e, rng.next_u64(), 1.0);
            const auto prompts = seeded_gaussian<double>(static_cast<std::size_t>(n_classes), e, rng.next_u64(), 1.0);
            std::vector<int> labels(nk);
            for (std::size_t i = 0; i < nk; ++i) labels[i] = static_cast<int>(i) % n_classes;
            const double temperature = 0.3;

            const auto result = loss_fsl(support, prompts, labels, temperature, variant);
            const auto fd_support = fd_gradient(
                [&](const Matrix<double>& p) {
                    return static_cast<double>(loss_fsl(p, prompts, labels, temperature, variant).value);
                },
                support, 1e-5);
            const auto fd_prompts = fd_gradient(
                [&](const Matrix<double>& p) {
                    return static_cast<double>(loss_fsl(support, p, labels, temperature, variant).value);
                },
                prompts, 1e-5);
            CHECK(max_rel_error(result.grad_left, fd_support) <= 1e-5);
            CHECK(max_rel_error(result.grad_right, fd_prompts) <= 1e-5);
        }
    }
}

TEST_CASE("backward_adapter: zero upstream gradient gives zero parameter gradients") {
    const std::size_t m = 4, k = 8, d = 6;
    AdapterConfig config;
    config.rank = 4;
    config.blocks = 2;
    AnyAdapter<double> adapter = init_adapter<double>(config, k, d, 60);
    const auto x = seeded_gaussian<double>(m, k, 61, 1.0);
    const auto grads = backward_adapter(zeros<double>(m, d), x, adapter);
    CHECK(max_abs(grads.down) == 0.0);
    for (const auto& g : grads.up) CHECK(max_abs(g) == 0.0);
}

TEST_CASE("backward_adapter: every up-block gradient is the same matrix, bit for bit") {
    const std::size_t m = 4, k = 8, d = 6;
    AdapterConfig config;
    config.rank = 8;
    config.blocks = 4;
    AnyAdapter<double> adapter = init_adapter<double>(config, k, d, 70);
    Rng rng(71);
    for (Matrix<double>* p : trainable_params(adapter)) {
        for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.1 * rng.normal();
    }
    finish_mutation(adapter);
    const auto x = seeded_gaussian<double>(m, k, 72, 1.0);
    const auto upstream = seeded_gaussian<double>(m, d, 73, 1.0);
    const auto grads = backward_adapter(upstream, x, adapter);
    REQUIRE(grads.up.size() == 4);
    for (std::size_t b = 1; b < grads.up.size(); ++b) CHECK(grads.up[b].bitwise_equal(grads.up[0]));
}

TEST_CASE("backward_adapter matches finite differences through a linear probe loss") {
    // Probe loss L = sum(forward .* direction); exact gradients flow through
    // the adapter formulas without a softmax in the way.
    Rng rng(80);
    for (int c = 0; c < 6; ++c) {
        const std::size_t m = 2 + rng.next_u64() % 3;
        const std::size_t k = 3 + rng.next_u64() % 5;
        const std::size_t d = 3 + rng.next_u64() % 5;
        const int r = (c % 2 == 0) ? 2 : 4;
        const int n = (c % 3 == 0) ? 1 : 2;
        AdapterConfig config;
        config.rank = r;
        config.blocks = n;
        config.scaling = 0.7;
        AnyAdapter<double> adapter = init_adapter<double>(config, k, d, rng.next_u64());
        for (Matrix<double>* p : trainable_params(adapter)) {
            for (std::size_t i = 0; i < p->size(); ++i) p->data()[i] += 0.2 * rng.normal();
        }
        finish_mutation(adapter);

        const FrozenLinear<double> layer{seeded_gaussian<double>(k, d, rng.next_u64(), 0.5)};
        const auto x = seeded_gaussian<double>(m, k, rng.next_u64(), 1.0);
        const auto direction = seeded_gaussian<double>(m, d, rng.next_u64(), 1.0);

        auto probe_loss = [&](AnyAdapter<double>& ad) {
            finish_mutation(ad);
            const auto out = forward_adapted(x, layer, ad);
            double total = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) total += out.data()[i] * direction.data()[i];
            return total;
        };

        const auto analytic = backward_adapter(direction, x, adapter);
        auto params = trainable_params(adapter);
        auto analytic_list = gradient_list(analytic);
        REQUIRE(params.size() == analytic_list.size());
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Matrix<double> fd(params[pi]->rows(), params[pi]->cols());
            for (std::size_t i = 0; i < params[pi]->size(); ++i) {
                const double saved = params[pi]->data()[i];
                params[pi]->data()[i] = saved + 1e-5;
                const double plus = probe_loss(adapter);
                params[pi]->data()[i] = saved - 1e-5;
                const double minus = probe_loss(adapter);
                params[pi]->data()[i] = saved;
                finish_mutation(adapter);
                fd.data()[i] = (plus - minus) / 2e-5;
            }
            CHECK(max_rel_error(*analytic_list[pi], fd) <= 1e-5);
        }
    }
}

TEST_CASE("AdamW single-step hand oracle") {
    Matrix<double> p(1, 1);
    p(0, 0) = 1.0;
    Matrix<double> g(1, 1);
    g(0, 0) = 1.0;

    SUBCASE("no weight decay: unit-magnitude bias-corrected step") {
        AdamWConfig config;
        config.lr = 0.1;
        config.weight_decay = 0.0;
        AdamW<double> opt(config);
        opt.step({&p}, {&g}, 0.1);
        // mhat = vhat = 1 after bias correction, so p <- 1 - 0.1 * 1/(1 + eps).
        CHECK(p(0, 0) == doctest::Approx(0.9).epsilon(1e-7));
    }
    SUBCASE("decoupled decay additionally subtracts lr * wd * p") {
        AdamWConfig config;
        config.lr = 0.1;
        config.weight_decay = 0.0;
        AdamW<double> no_decay(config);
        Matrix<double> p1 = p;
        no_decay.step({&p1}, {&g}, 0.1);

        config.weight_decay = 0.01;
        AdamW<double> with_decay(config);
        Matrix<double> p2 = p;
        with_decay.step({&p2}, {&g}, 0.1);
        CHECK(p2(0, 0) == doctest::Approx(p1(0, 0) - 0.1 * 0.01 * 1.0).epsilon(1e-12));
    }
}

TEST_CASE("AdamW: zero gradient with zero decay leaves parameters unchanged") {
    AdamWConfig config;
    config.weight_decay = 0.0;
    AdamW<double> opt(config);
    auto p = seeded_gaussian<double>(3, 3, 90, 1.0);
    const auto before = p;
    const auto g = zeros<double>(3, 3);
    for (int i = 0; i < 5; ++i) opt.step({&p}, {&g}, 0.1);
    CHECK(p.bitwise_equal(before));
}

TEST_CASE("AdamW: lr = 0 changes nothing regardless of gradients") {
    AdamW<double> opt(AdamWConfig{});
    auto p = seeded_gaussian<double>(3, 3, 91, 1.0);
    const auto before = p;
    const auto g = seeded_gaussian<double>(3, 3, 92, 1.0);
    opt.step({&p}, {&g}, 0.0);
    CHECK(p.bitwise_equal(before));
}

TEST_CASE("AdamW shape mismatch is rejected") {
    AdamW<double> opt(AdamWConfig{});
    auto p = seeded_gaussian<double>(3, 3, 93, 1.0);
    const auto g = zeros<double>(2, 2);
    CHECK_THROWS_AS(opt.step({&p}, {&g}, 0.1), ShapeError);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    const CosineSchedule schedule{2e-4, 200};
    CHECK(schedule.lr_at(0) == 2e-4);
    CHECK(std::abs(schedule.lr_at(200)) <= 1e-20);
    CHECK(schedule.lr_at(100) == doctest::Approx(1e-4).epsilon(1e-12));
    for (int s = 1; s <= 200; ++s) CHECK(schedule.lr_at(s) <= schedule.lr_at(s - 1));
    CHECK_THROWS_AS(schedule.lr_at(-1), RangeError);
    CHECK_THROWS_AS(schedule.lr_at(201), RangeError);
}
