#pragma once

// Portable seeded sampling. std::mt19937_64 output is fixed by the standard,
// but std:: distributions are not, so every sampler used for generated data or
// fold assignment is defined here.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

#include "replica/digest.hpp"

namespace replica {

/// First 8 bytes (big-endian) of SHA-256(label).
inline std::uint64_t derive_seed(std::string_view label) {
    auto raw = Sha256{}.update(label).finish_raw();
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | raw[static_cast<std::size_t>(i)];
    return v;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer on [0, bound), bound > 0, by rejection.
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = bound * (UINT64_MAX / bound);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    /// Box-Muller; one variate per call (no cached pair).
    double normal(double mean = 0.0, double sd = 1.0) {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Knuth's product method below mean 30, rounded normal above.
    std::uint64_t poisson(double mean) {
        if (!(mean > 0.0)) return 0;
        if (mean < 30.0) {
            const double limit = std::exp(-mean);
            std::uint64_t k = 0;
            double p = uniform();
            while (p > limit) {
                ++k;
                p *= uniform();
            }
            return k;
        }
        double x = std::round(normal(mean, std::sqrt(mean)));
        return x < 0 ? 0 : static_cast<std::uint64_t>(x);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates, from the back.
    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

} // namespace replica
