#pragma once

#include <cstdint>
#include <random>

namespace mhnes {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; mixes a base seed with a stream tag.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace mhnes
