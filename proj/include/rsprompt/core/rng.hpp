#pragma once

// Seeded random streams. Only std::mt19937_64 (fully specified by the standard) is used
// as a bit source; the distributions below are written out so results do not depend
// on the standard library implementation.

#include "rsprompt/core/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

namespace rsprompt {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a tag and integer coordinates,
/// e.g. derive_seed("fewshot/eurosat", k, seed).
template <class... Ints>
std::uint64_t derive_seed(std::string_view tag, Ints... coords) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : tag) h = (h ^ c) * 0x100000001b3ull;
    ((h = splitmix64(h ^ static_cast<std::uint64_t>(coords))), ...);
    return splitmix64(h);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), rejection-sampled so it is unbiased.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class T>
    Mat<T> normal_matrix(Index rows, Index cols, double stddev) {
        Mat<T> m(rows, cols);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal() * stddev);
        return m;
    }

    /// Fisher-Yates.
    template <class It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace rsprompt
