#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "blocklora/errors.hpp"
#include "blocklora/linalg.hpp"
#include "blocklora/matrix.hpp"

namespace blocklora {

/// Which softmax denominator the episodic loss uses.
///  - contrastive_batch: row-paired batch, denominator over all batch rows.
///  - fsl_as_written:    denominator over the text embeddings of all N*K
///                       support samples (class prompts appear K times each).
///  - fsl_classwise:     plain N-way cross-entropy over the N class prompts.
enum class LossVariant {
    contrastive_batch,
    fsl_as_written,
    fsl_classwise,
};

inline std::string loss_variant_name(LossVariant v) {
    switch (v) {
        case LossVariant::contrastive_batch: return "contrastive";
        case LossVariant::fsl_as_written: return "as-written";
        case LossVariant::fsl_classwise: return "classwise";
    }
    return "unknown";
}

inline LossVariant parse_loss_variant(const std::string& text) {
    if (text == "as-written") return LossVariant::fsl_as_written;
    if (text == "classwise") return LossVariant::fsl_classwise;
    if (text == "contrastive") return LossVariant::contrastive_batch;
    throw ConfigError("unknown loss variant '" + text + "' (expected as-written or classwise)");
}

/// Loss value plus exact gradients with respect to the raw (unnormalized)
/// embedding matrices that were passed in.
template <typename T>
struct LossResult {
    T value = T(0);
    Matrix<T> grad_left;   // same shape as the left/query embeddings
    Matrix<T> grad_right;  // same shape as the right/text embeddings
};

namespace detail {

/// Row-normalizes and records the norms. Throws on rows that cannot be
/// cosine-normalized.
template <typename T>
Matrix<T> l2_normalize_rows(const Matrix<T>& m, std::vector<double>& norms, const char* what) {
    Matrix<T> out(m.rows(), m.cols());
    norms.resize(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            const double v = static_cast<double>(m(i, j));
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm == 0.0 || !std::isfinite(norm)) {
            throw DegenerateEmbeddingError(std::string(what) + " row " + std::to_string(i) +
                                           " has zero or non-finite norm, cannot normalize");
        }
        norms[i] = norm;
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = static_cast<T>(static_cast<double>(m(i, j)) / norm);
    }
    return out;
}

/// Pulls a gradient on normalized rows back through the normalization:
/// d/dv of v/|v| applied to g is (g - (g . v_hat) v_hat) / |v|.
template <typename T>
Matrix<T> through_normalization(const Matrix<T>& grad_normed, const Matrix<T>& normed,
                                const std::vector<double>& norms) {
    Matrix<T> out(grad_normed.rows(), grad_normed.cols());
    for (std::size_t i = 0; i < grad_normed.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < grad_normed.cols(); ++j) {
            dot += static_cast<double>(grad_normed(i, j)) * static_cast<double>(normed(i, j));
        }
        for (std::size_t j = 0; j < grad_normed.cols(); ++j) {
            const double g = static_cast<double>(grad_normed(i, j)) - dot * static_cast<double>(normed(i, j));
            out(i, j) = static_cast<T>(g / norms[i]);
        }
    }
    return out;
}

}  // namespace detail

/// Core loss shared by all variants: batch-mean cross-entropy over cosine
/// similarities divided by the temperature,
///   L = -(1/m) sum_i log softmax_j(cos(left_i, right_j) / temperature)[target_i].
/// Gradients are exact, including the L2-normalization Jacobian of both sides.
template <typename T>
LossResult<T> cosine_softmax_loss(const Matrix<T>& left, const Matrix<T>& right, const std::vector<int>& targets,
                                  double temperature) {
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (left.cols() != right.cols()) {
        throw ShapeError("embedding width mismatch: " + left.shape_str() + " vs " + right.shape_str());
    }
    if (targets.size() != left.rows()) {
        throw ShapeError("target count " + std::to_string(targets.size()) + " does not match " +
                         std::to_string(left.rows()) + " rows");
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= right.rows()) {
            throw LabelError("target " + std::to_string(t) + " out of range [0, " + std::to_string(right.rows()) +
                             ")");
        }
    }

    std::vector<double> left_norms, right_norms;
    const Matrix<T> lhat = detail::l2_normalize_rows(left, left_norms, "left embedding");
    const Matrix<T> rhat = detail::l2_normalize_rows(right, right_norms, "right embedding");

    const std::size_t m = left.rows();
    const std::size_t p = right.rows();
    const Matrix<T> sims = matmul(lhat, transpose(rhat));  // m x p cosine similarities

    // Stable per-row log-softmax of sims / temperature.
    Matrix<T> probs(m, p);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < p; ++j) {
            row_max = std::max(row_max, static_cast<double>(sims(i, j)) / temperature);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            denom += std::exp(static_cast<double>(sims(i, j)) / temperature - row_max);
        }
        const double log_denom = std::log(denom) + row_max;
        for (std::size_t j = 0; j < p; ++j) {
            probs(i, j) = static_cast<T>(std::exp(static_cast<double>(sims(i, j)) / temperature - log_denom));
        }
        total += log_denom - static_cast<double>(sims(i, static_cast<std::size_t>(targets[i]))) / temperature;
    }

    LossResult<T> result;
    result.value = static_cast<T>(total / static_cast<double>(m));

    // dL/dsims[i][j] = (probs[i][j] - [j == target_i]) / (m * temperature)
    Matrix<T> dsims(m, p);
    const double inv = 1.0 / (static_cast<double>(m) * temperature);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            const double indicator = (static_cast<std::size_t>(targets[i]) == j) ? 1.0 : 0.0;
            dsims(i, j) = static_cast<T>((static_cast<double>(probs(i, j)) - indicator) * inv);
        }
    }

    const Matrix<T> grad_lhat = matmul(dsims, rhat);             // m x e
    const Matrix<T> grad_rhat = matmul(transpose(dsims), lhat);  // p x e
    result.grad_left = detail::through_normalization(grad_lhat, lhat, left_norms);
    result.grad_right = detail::through_normalization(grad_rhat, rhat, right_norms);
    return result;
}

/// Row-paired batch contrastive loss: each embedding row is scored against
/// every text row, with the matching index as the positive.
template <typename T>
LossResult<T> loss_contrastive(const Matrix<T>& image_emb, const Matrix<T>& text_emb, double temperature) {
    if (image_emb.rows() != text_emb.rows()) {
        throw ShapeError("contrastive loss needs row-paired batches: " + image_emb.shape_str() + " vs " +
                         text_emb.shape_str());
    }
    if (image_emb.rows() < 2) throw ConfigError("contrastive loss needs a batch of at least 2 pairs");
    std::vector<int> targets(image_emb.rows());
    std::iota(targets.begin(), targets.end(), 0);
    return cosine_softmax_loss(image_emb, text_emb, targets, temperature);
}

/// Episodic loss over N*K support embeddings and N class-prompt embeddings.
/// grad_right is with respect to the N class embeddings in both variants (the
/// as-written variant scatter-adds the duplicated-row gradients back).
template <typename T>
LossResult<T> loss_fsl(const Matrix<T>& support_emb, const Matrix<T>& class_emb, const std::vector<int>& labels,
                       double temperature, LossVariant variant) {
    if (labels.size() != support_emb.rows()) {
        throw ShapeError("label count " + std::to_string(labels.size()) + " does not match support batch " +
                         support_emb.shape_str());
    }
    for (int label : labels) {
        if (label < 0 || static_cast<std::size_t>(label) >= class_emb.rows()) {
            throw LabelError("label " + std::to_string(label) + " out of range [0, " +
                             std::to_string(class_emb.rows()) + ")");
        }
    }

    if (variant == LossVariant::fsl_classwise) {
        return cosine_softmax_loss(support_emb, class_emb, labels, temperature);
    }
    if (variant != LossVariant::fsl_as_written) {
        throw ConfigError("loss_fsl expects an episodic loss variant");
    }

    // Materialize one text row per support sample (its class prompt), score
    // every support row against all N*K of them, then fold the duplicated-row
    // gradients back onto the N class embeddings.
    const std::size_t nk = support_emb.rows();
    Matrix<T> gathered(nk, class_emb.cols());
    for (std::size_t i = 0; i < nk; ++i) {
        for (std::size_t j = 0; j < class_emb.cols(); ++j) {
            gathered(i, j) = class_emb(static_cast<std::size_t>(labels[i]), j);
        }
    }
    std::vector<int> targets(nk);
    std::iota(targets.begin(), targets.end(), 0);
    LossResult<T> expanded = cosine_softmax_loss(support_emb, gathered, targets, temperature);

    LossResult<T> result;
    result.value = expanded.value;
    result.grad_left = std::move(expanded.grad_left);
    result.grad_right = zeros<T>(class_emb.rows(), class_emb.cols());
    for (std::size_t i = 0; i < nk; ++i) {
        for (std::size_t j = 0; j < class_emb.cols(); ++j) {
            result.grad_right(static_cast<std::size_t>(labels[i]), j) += expanded.grad_right(i, j);
        }
    }
    return result;
}

/// Softmax over cosine similarities between one embedding and the class
/// embeddings; returns per-class probabilities and the argmax label
/// (lowest index wins ties).
template <typename T>
std::pair<std::vector<double>, int> classify(const Matrix<T>& embedding, const Matrix<T>& class_emb,
                                             double temperature) {
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (embedding.rows() != 1 || embedding.cols() != class_emb.cols()) {
        throw ShapeError("classify expects a 1x" + std::to_string(class_emb.cols()) + " embedding, got " +
                         embedding.shape_str());
    }
    std::vector<double> v_norms, c_norms;
    const Matrix<T> vhat = detail::l2_normalize_rows(embedding, v_norms, "query embedding");
    const Matrix<T> chat = detail::l2_normalize_rows(class_emb, c_norms, "class embedding");

    const std::size_t n = class_emb.rows();
    std::vector<double> logits(n);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < class_emb.cols(); ++e) {
            dot += static_cast<double>(vhat(0, e)) * static_cast<double>(chat(j, e));
        }
        logits[j] = dot / temperature;
        top = std::max(top, logits[j]);
    }
    double denom = 0.0;
    for (double logit : logits) denom += std::exp(logit - top);
    std::vector<double> probs(n);
    int argmax = 0;
    for (std::size_t j = 0; j < n; ++j) {
        probs[j] = std::exp(logits[j] - top) / denom;
        if (probs[j] > probs[static_cast<std::size_t>(argmax)]) argmax = static_cast<int>(j);
    }
    return {std::move(probs), argmax};
}

}  // namespace blocklora
