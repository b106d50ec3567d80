#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "blocklora/errors.hpp"
#include "blocklora/kernels.hpp"
#include "blocklora/matrix.hpp"
#include "blocklora/rng.hpp"

namespace blocklora {

/// Dense product a * b. If a counter is given, records rows(a)*cols(a)*cols(b)
/// multiply-accumulates regardless of the active kernel backend.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, MacCounter* counter = nullptr) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
    }
    Matrix<T> c(a.rows(), b.cols());
    kernels::matmul(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    if (counter) counter->record_macs(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
    return c;
}

/// Elementwise sum; records rows*cols adds when a counter is given.
template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b, MacCounter* counter = nullptr) {
    if (!a.same_shape(b)) {
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix<T> out(a.rows(), a.cols());
    kernels::add(a.data(), b.data(), out.data(), a.size());
    if (counter) counter->record_adds(static_cast<std::uint64_t>(a.size()));
    return out;
}

template <typename T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("sub shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T factor) {
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * factor;
    return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("hadamard shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    }
    return out;
}

/// Column-wise concatenation preserving part order. All parts need equal row counts.
template <typename T>
Matrix<T> concat_cols(const std::vector<Matrix<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw ShapeError("concat_cols row mismatch: " + p.shape_str() + " vs " + parts.front().shape_str());
        }
        cols += p.cols();
    }
    Matrix<T> out(rows, cols);
    std::size_t col_offset = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, col_offset + j) = p(i, j);
        }
        col_offset += p.cols();
    }
    return out;
}

/// Row-wise concatenation preserving part order. All parts need equal column counts.
template <typename T>
Matrix<T> concat_rows(const std::vector<Matrix<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) {
            throw ShapeError("concat_rows column mismatch: " + p.shape_str() + " vs " + parts.front().shape_str());
        }
        rows += p.rows();
    }
    Matrix<T> out(rows, cols);
    std::size_t row_offset = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < p.rows(); ++i) {
            for (std::size_t j = 0; j < cols; ++j) out(row_offset + i, j) = p(i, j);
        }
        row_offset += p.rows();
    }
    return out;
}

/// Splits into `parts` equal column blocks, left to right.
template <typename T>
std::vector<Matrix<T>> split_cols(const Matrix<T>& a, std::size_t parts) {
    if (parts == 0 || a.cols() % parts != 0) {
        throw ShapeError("split_cols: cannot split " + std::to_string(a.cols()) + " columns into " +
                         std::to_string(parts) + " equal parts");
    }
    const std::size_t width = a.cols() / parts;
    std::vector<Matrix<T>> out;
    out.reserve(parts);
    for (std::size_t p = 0; p < parts; ++p) {
        Matrix<T> block(a.rows(), width);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < width; ++j) block(i, j) = a(i, p * width + j);
        }
        out.push_back(std::move(block));
    }
    return out;
}

/// Splits into `parts` equal row blocks, top to bottom.
template <typename T>
std::vector<Matrix<T>> split_rows(const Matrix<T>& a, std::size_t parts) {
    if (parts == 0 || a.rows() % parts != 0) {
        throw ShapeError("split_rows: cannot split " + std::to_string(a.rows()) + " rows into " +
                         std::to_string(parts) + " equal parts");
    }
    const std::size_t height = a.rows() / parts;
    std::vector<Matrix<T>> out;
    out.reserve(parts);
    for (std::size_t p = 0; p < parts; ++p) {
        Matrix<T> block(height, a.cols());
        for (std::size_t i = 0; i < height; ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) block(i, j) = a(p * height + i, j);
        }
        out.push_back(std::move(block));
    }
    return out;
}

template <typename T>
Matrix<T> zeros(std::size_t rows, std::size_t cols) {
    return Matrix<T>(rows, cols);
}

template <typename T>
Matrix<T> identity(std::size_t n) {
    Matrix<T> out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
}

/// Deterministic Gaussian fill in row-major order; identical (seed, shape,
/// stddev) always yields identical data. Samples are drawn in double precision
/// and rounded once, so the f32 matrix is the rounding of the f64 one.
template <typename T>
Matrix<T> seeded_gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev) {
    if (stddev <= 0.0) throw ConfigError("seeded_gaussian requires stddev > 0");
    Matrix<T> out(rows, cols);
    Rng rng(seed);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<T>(rng.normal(stddev));
    return out;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    }
    return worst;
}

template <typename T>
double max_abs(const Matrix<T>& a) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a.data()[i])));
    return worst;
}

/// FNV-1a over the raw bytes; used to assert frozen weights never move.
template <typename T>
std::uint64_t content_hash(const Matrix<T>& a) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(a.data());
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < a.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace blocklora
