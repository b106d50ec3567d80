#include <atomic>

#include "blocklora/errors.hpp"
#include "blocklora/kernels.hpp"

namespace blocklora::kernels {

namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

std::atomic<Backend>& active_slot() {
    static std::atomic<Backend> slot{detect_best()};
    return slot;
}

}  // namespace

Backend detect_best() {
    return cpu_has_avx2_fma() ? Backend::avx2 : Backend::scalar;
}

Backend active() { return active_slot().load(std::memory_order_relaxed); }

void set_active(Backend backend) {
    if (!supported(backend)) {
        throw ConfigError("kernel backend '" + name(backend) + "' is not supported on this CPU");
    }
    active_slot().store(backend, std::memory_order_relaxed);
}

bool supported(Backend backend) {
    switch (backend) {
        case Backend::scalar:
            return true;
        case Backend::avx2:
            return cpu_has_avx2_fma();
    }
    return false;
}

std::string name(Backend backend) {
    switch (backend) {
        case Backend::scalar:
            return "scalar";
        case Backend::avx2:
            return "avx2";
    }
    return "unknown";
}

Backend parse(const std::string& text) {
    if (text == "scalar") return Backend::scalar;
    if (text == "avx2") return Backend::avx2;
    if (text == "auto") return detect_best();
    throw ConfigError("unknown kernel backend '" + text + "' (expected scalar, avx2 or auto)");
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
#if defined(__x86_64__) || defined(_M_X64)
    if (active() == Backend::avx2) {
        matmul_avx2(a, b, c, m, k, n);
        return;
    }
#endif
    matmul_scalar(a, b, c, m, k, n);
}

template <typename T>
void add(const T* a, const T* b, T* out, std::size_t len) {
#if defined(__x86_64__) || defined(_M_X64)
    if (active() == Backend::avx2) {
        add_avx2(a, b, out, len);
        return;
    }
#endif
    add_scalar(a, b, out, len);
}

template void matmul<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void matmul<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void add<float>(const float*, const float*, float*, std::size_t);
template void add<double>(const double*, const double*, double*, std::size_t);

}  // namespace blocklora::kernels
