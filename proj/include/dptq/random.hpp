// Copyright (C) 2026 The dptq Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "dptq/linalg.hpp"

namespace dptq {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed for (seed, tag, index).
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the tag
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(seed ^ h) + index);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return std::generate_canonical<double, 53>(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * std::generate_canonical<double, 53>(engine_); }
    std::uint64_t next() { return engine_(); }

    Vector normal_vector(std::size_t n, double stddev = 1.0) {
        Vector v(n);
        for (auto& x : v) x = stddev * normal();
        return v;
    }
    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
        Matrix m(rows, cols);
        for (auto& x : m.values()) x = stddev * normal();
        return m;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace dptq
