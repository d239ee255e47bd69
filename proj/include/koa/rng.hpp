#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace koa {

/// Deterministic 64-bit generator (splitmix64). Produces the same stream on
/// every platform for a given seed, which the std distributions do not
/// guarantee. All randomness in the project flows through this type.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in [a, b); returns a exactly when a == b.
    double uniform(double a, double b) {
        if (a == b) return a;
        return a + (b - a) * next_double();
    }

    /// Uniform index in [0, n). n must be positive.
    size_t uniform_index(size_t n) {
        return static_cast<size_t>(next_u64() % static_cast<uint64_t>(n));
    }

    bool bernoulli(double p) { return next_double() < p; }

    double normal(double mean, double stddev) {
        // Box-Muller; draws a fresh pair each call, no cached spare.
        double u1 = next_double();
        double u2 = next_double();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

/// Derives an independent stream seed from a base seed and a tag. FNV-1a over
/// the tag bytes, offset by the base seed.
inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ull ^ (seed * 0x100000001b3ull + 0x9e3779b97f4a7c15ull);
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t seed, uint64_t n) {
    uint64_t h = 0xcbf29ce484222325ull ^ (seed * 0x100000001b3ull + 0x9e3779b97f4a7c15ull);
    for (int i = 0; i < 8; ++i) {
        h ^= (n >> (8 * i)) & 0xffull;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace koa
