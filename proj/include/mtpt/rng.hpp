#pragma once

#include <cstdint>
#include <random>

namespace mtpt {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    return mix64(mix64(base) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

// The std:: distributions are implementation-defined; these are not, so
// datasets and views reproduce across standard libraries.

/// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer on [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(n));
}

inline bool coin(Rng& rng) { return (rng() >> 63) != 0; }

/// Standard normal via Box-Muller.
double normal01(Rng& rng);

}  // namespace mtpt
