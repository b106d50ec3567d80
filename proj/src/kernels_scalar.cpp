#include "blocklora/kernels.hpp"

namespace blocklora::kernels {

// Plain triple loop, dot-product order. This is the semantic reference for
// every other backend.
template <typename T>
void matmul_scalar(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t l = 0; l < k; ++l) {
                acc += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void add_scalar(const T* a, const T* b, T* out, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
        out[i] = a[i] + b[i];
    }
}

template void matmul_scalar<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void matmul_scalar<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void add_scalar<float>(const float*, const float*, float*, std::size_t);
template void add_scalar<double>(const double*, const double*, double*, std::size_t);

}  // namespace blocklora::kernels
