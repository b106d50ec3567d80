#pragma once

#include <cstddef>
#include <string>

namespace blocklora::kernels {

/// Compute backend for the dense inner loops. `scalar` is the reference
/// implementation and defines the semantics; vector backends must agree with
/// it to floating-point reassociation accuracy (see the equivalence tests).
enum class Backend {
    scalar,
    avx2,
};

/// Best backend supported by the executing CPU (queried once, cached).
Backend detect_best();

/// Currently active backend. Defaults to detect_best().
Backend active();

/// Selects the backend for all subsequent dispatched calls.
/// Throws ConfigError if the CPU does not support it.
void set_active(Backend backend);

bool supported(Backend backend);

std::string name(Backend backend);

/// Parses "scalar", "avx2" or "auto". Throws ConfigError on anything else.
Backend parse(const std::string& text);

// Reference kernels. c = a * b with a: m x k, b: k x n, all row-major.
// c must not alias a or b.
template <typename T>
void matmul_scalar(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void add_scalar(const T* a, const T* b, T* out, std::size_t len);

#if defined(__x86_64__) || defined(_M_X64)
void matmul_avx2(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_avx2(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void add_avx2(const float* a, const float* b, float* out, std::size_t len);
void add_avx2(const double* a, const double* b, double* out, std::size_t len);
#endif

// Dispatched entry points used by the Matrix-level operations.
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

template <typename T>
void add(const T* a, const T* b, T* out, std::size_t len);

}  // namespace blocklora::kernels
