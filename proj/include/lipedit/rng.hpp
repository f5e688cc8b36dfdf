// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "lipedit/tensor.hpp"

namespace lipedit {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Mixes a seed with stream identifiers into an independent seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    uint64_t x = seed ^ (a * 0xD1B54A32D192ED03ULL) ^ (b * 0x8CB92BA72F3D8DD7ULL);
    splitmix64(x);
    return splitmix64(x);
}

/// xoshiro256** with explicit, portable distributions.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (auto& s : s_) s = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return r % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    Tensor normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data()) v = normal() * stddev;
        return t;
    }

    Tensor uniform_tensor(Shape shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data()) v = uniform(lo, hi);
        return t;
    }

    /// k distinct indices from [0, n) in sampling order (partial Fisher-Yates).
    std::vector<int64_t> sample_distinct(int64_t n, int64_t k) {
        std::vector<int64_t> pool(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        k = std::min(k, n);
        for (int64_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<int64_t>(below(static_cast<uint64_t>(n - i)));
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        pool.resize(static_cast<size_t>(k));
        return pool;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4]{};
};

}  // namespace lipedit
