// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

namespace compt {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Stateless generator: every draw is a pure function of its key, so draws
/// never depend on how many other draws happened before them.
class CounterRng {
public:
    explicit constexpr CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

    [[nodiscard]] constexpr std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                                               std::uint64_t d = 0) const noexcept {
        std::uint64_t h = mix64(seed_ ^ 0x5851F42D4C957F2DULL);
        h = mix64(h ^ a);
        h = mix64(h ^ (b + 0x632BE59BD9B4E019ULL));
        h = mix64(h ^ (c + 0x8CB92BA72F3D8DD7ULL));
        h = mix64(h ^ (d + 0xD1B54A32D192ED03ULL));
        return h;
    }

    /// Uniform draw strictly inside (0, 1).
    [[nodiscard]] constexpr double uniform_open(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                                                std::uint64_t d = 0) const noexcept {
        return (static_cast<double>(bits(a, b, c, d) >> 11) + 0.5) * 0x1.0p-53;
    }

    [[nodiscard]] constexpr std::uint64_t seed() const noexcept { return seed_; }

private:
    std::uint64_t seed_;
};

/// Sequential engine seeded from a key; used for parameter init and data generation.
inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream = 0) {
    return std::mt19937_64(mix64(seed ^ mix64(stream + 0xA0761D6478BD642FULL)));
}

}  // namespace compt
