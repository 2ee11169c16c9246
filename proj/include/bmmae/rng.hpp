#pragma once

#include <cmath>
#include <random>

#include "bmmae/common.hpp"

// Small self-contained samplers over std::mt19937_64 so draw sequences are
// fixed by this code alone (libstdc++ distribution internals never enter the
// determinism contract).
namespace bmmae::rng {

inline double uniform01(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * uniform01(g);
}

inline double gauss(std::mt19937_64& g) {
    double u1 = uniform01(g), u2 = uniform01(g);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Marsaglia–Tsang gamma sampler (shape a, unit scale).
inline double gamma_sample(std::mt19937_64& g, double a) {
    if (a <= 0.0) throw ConfigError("gamma shape must be positive");
    if (a < 1.0) {
        double u = uniform01(g);
        if (u < 1e-300) u = 1e-300;
        return gamma_sample(g, a + 1.0) * std::pow(u, 1.0 / a);
    }
    const double d = a - 1.0 / 3.0;
    const double c = 1.0 / (3.0 * std::sqrt(d));
    for (;;) {
        double x, v;
        do {
            x = gauss(g);
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform01(g);
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

// Partial Fisher–Yates: k distinct values from {0..n-1}, order randomized.
inline std::vector<int64_t> sample_without_replacement(std::mt19937_64& g, int64_t n, int64_t k) {
    std::vector<int64_t> pool(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + static_cast<int64_t>(g() % static_cast<uint64_t>(n - i));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(k));
    return pool;
}

}  // namespace bmmae::rng
