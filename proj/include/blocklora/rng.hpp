#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace blocklora {

/// SplitMix64 generator (Steele, Lea, Flood 2014). The engine pins this exact
/// generator, the uniform mapping and the Box-Muller transform below so that
/// every seeded result is bit-reproducible across builds and platforms;
/// standard-library distributions do not give that guarantee.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

/// Derives a child seed from a base seed and a list of stream identifiers.
/// Order-sensitive: derive_seed(s, {a, b}) != derive_seed(s, {b, a}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> stream) {
    std::uint64_t s = base;
    for (std::uint64_t word : stream) {
        SplitMix64 g(s ^ (word + 0x9E3779B97F4A7C15ULL));
        s = g.next();
    }
    return s;
}

/// Seeded random stream with splittable substreams and Gaussian sampling.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_.next(); }

    /// Uniform double in [0, 1): top 53 bits of the next word.
    double uniform() { return static_cast<double>(gen_.next() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; pairs are cached, so call parity matters
    /// for reproducibility (it is part of the pinned stream definition).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double stddev) { return stddev * normal(); }

    /// Independent substream; deterministic in (parent seed, consumed words, tag).
    Rng split(std::uint64_t tag) { return Rng(derive_seed(gen_.next(), {tag})); }

private:
    SplitMix64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace blocklora
