#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cstring>

#include "blocklora/kernels.hpp"

namespace blocklora::kernels {

// AXPY-ordered matmul: for each (i, l) broadcast a[i,l] and accumulate into
// row i of c. Accumulation order differs from the scalar reference (FMA plus
// l-major sweep), so results match it to reassociation accuracy, not bitwise.

void matmul_avx2(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t kLanes = 4;
    const std::size_t n_vec = n / kLanes * kLanes;
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(double));
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = a[i * k + l];
            const double* brow = b + l * n;
            const __m256d av = _mm256_set1_pd(ail);
            std::size_t j = 0;
            for (; j < n_vec; j += kLanes) {
                __m256d cv = _mm256_loadu_pd(crow + j);
                cv = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + j), cv);
                _mm256_storeu_pd(crow + j, cv);
            }
            for (; j < n; ++j) {
                crow[j] += ail * brow[j];
            }
        }
    }
}

void matmul_avx2(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t kLanes = 8;
    const std::size_t n_vec = n / kLanes * kLanes;
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(float));
        for (std::size_t l = 0; l < k; ++l) {
            const float ail = a[i * k + l];
            const float* brow = b + l * n;
            const __m256 av = _mm256_set1_ps(ail);
            std::size_t j = 0;
            for (; j < n_vec; j += kLanes) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            for (; j < n; ++j) {
                crow[j] += ail * brow[j];
            }
        }
    }
}

void add_avx2(const double* a, const double* b, double* out, std::size_t len) {
    constexpr std::size_t kLanes = 4;
    const std::size_t vec = len / kLanes * kLanes;
    std::size_t i = 0;
    for (; i < vec; i += kLanes) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < len; ++i) {
        out[i] = a[i] + b[i];
    }
}

void add_avx2(const float* a, const float* b, float* out, std::size_t len) {
    constexpr std::size_t kLanes = 8;
    const std::size_t vec = len / kLanes * kLanes;
    std::size_t i = 0;
    for (; i < vec; i += kLanes) {
        _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    }
    for (; i < len; ++i) {
        out[i] = a[i] + b[i];
    }
}

}  // namespace blocklora::kernels

#endif  // x86_64
