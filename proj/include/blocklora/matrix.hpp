#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <string>
#include <type_traits>
#include <vector>

#include "blocklora/errors.hpp"

namespace blocklora {

/// Counts multiply-accumulate and elementwise-add operations recorded by the
/// instrumented linear algebra entry points. Multiplies and adds are tracked
/// separately because the complexity accounting compares them separately.
class MacCounter {
public:
    MacCounter() = default;

    void record_macs(std::uint64_t n) {
        if (enabled_) mac_count_ += n;
    }
    void record_adds(std::uint64_t n) {
        if (enabled_) add_count_ += n;
    }

    std::uint64_t macs() const { return mac_count_; }
    std::uint64_t adds() const { return add_count_; }
    bool enabled() const { return enabled_; }

    void enable() { enabled_ = true; }
    void disable() { enabled_ = false; }
    void reset() {
        mac_count_ = 0;
        add_count_ = 0;
    }

private:
    std::uint64_t mac_count_ = 0;
    std::uint64_t add_count_ = 0;
    bool enabled_ = true;
};

/// Dense row-major matrix. Values are immutable through the public operation
/// set (operations return new matrices); in-place mutation is reserved for
/// owners with exclusive access (optimizer updates, deserialization).
template <typename T>
class Matrix {
    static_assert(std::is_floating_point_v<T>, "Matrix requires a floating-point element type");

public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {
        if (rows == 0 || cols == 0) {
            throw ShapeError("matrix dimensions must be positive, got " + std::to_string(rows) + "x" +
                             std::to_string(cols));
        }
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows == 0 || cols == 0 || data_.size() != rows * cols) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    /// Row-of-rows literal, mainly for tests: Matrix<double>::from_rows({{1,2},{3,4}}).
    static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r > 0 ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged row in matrix literal");
            std::size_t j = 0;
            for (T v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }

    const T* data() const { return data_.data(); }
    T* data() { return data_.data(); }
    const std::vector<T>& values() const { return data_; }

    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    /// Exact representation equality (distinguishes -0.0 from +0.0).
    bool bitwise_equal(const Matrix& other) const {
        if (!same_shape(other)) return false;
        return data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

}  // namespace blocklora
