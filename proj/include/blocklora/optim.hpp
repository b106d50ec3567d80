#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "blocklora/errors.hpp"
#include "blocklora/matrix.hpp"

namespace blocklora {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ConfigError("AdamW betas must lie in [0, 1)");
        }
        if (eps <= 0.0) throw ConfigError("AdamW epsilon must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    }
};

/// AdamW with decoupled weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
/// Moments are held in double regardless of the parameter precision.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig config) : config_(config) { config_.validate(); }

    const AdamWConfig& config() const { return config_; }
    long step_count() const { return step_count_; }

    /// One update over a fixed parameter list. The list must have the same
    /// shapes on every call; moment state is keyed by position.
    void step(const std::vector<Matrix<T>*>& params, const std::vector<const Matrix<T>*>& grads, double lr) {
        if (params.size() != grads.size()) {
            throw ShapeError("optimizer got " + std::to_string(params.size()) + " params but " +
                             std::to_string(grads.size()) + " gradients");
        }
        if (first_moment_.empty()) {
            for (const auto* p : params) {
                first_moment_.emplace_back(p->size(), 0.0);
                second_moment_.emplace_back(p->size(), 0.0);
            }
        }
        if (first_moment_.size() != params.size()) {
            throw ShapeError("optimizer state tracks " + std::to_string(first_moment_.size()) +
                             " params, got " + std::to_string(params.size()));
        }

        ++step_count_;
        const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
        const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));

        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Matrix<T>& p = *params[pi];
            const Matrix<T>& g = *grads[pi];
            if (!p.same_shape(g)) {
                throw ShapeError("gradient shape " + g.shape_str() + " does not match parameter " + p.shape_str());
            }
            auto& m = first_moment_[pi];
            auto& v = second_moment_[pi];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g.data()[i]);
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
                const double mhat = m[i] / bias1;
                const double vhat = v[i] / bias2;
                const double pi_val = static_cast<double>(p.data()[i]);
                p.data()[i] = static_cast<T>(pi_val - lr * (mhat / (std::sqrt(vhat) + config_.eps)) -
                                             lr * config_.weight_decay * pi_val);
            }
        }
    }

    void step(const std::vector<Matrix<T>*>& params, const std::vector<const Matrix<T>*>& grads) {
        step(params, grads, config_.lr);
    }

private:
    AdamWConfig config_;
    long step_count_ = 0;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
};

/// Cosine annealing from base_lr at step 0 to 0 at total_steps.
struct CosineSchedule {
    double base_lr = 2e-4;
    int total_steps = 200;

    double lr_at(int step) const {
        if (total_steps < 1) throw ConfigError("schedule needs total_steps >= 1");
        if (step < 0 || step > total_steps) {
            throw RangeError("schedule step " + std::to_string(step) + " out of range [0, " +
                             std::to_string(total_steps) + "]");
        }
        return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                               static_cast<double>(total_steps)));
    }
};

}  // namespace blocklora
