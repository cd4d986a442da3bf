#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace kdiga {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives an independent seed for a named substream ("data", "init",
/// "attack", "schedule", ...) of a root seed.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(root ^ splitmix64(fnv1a(name)));
}

inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name, std::uint64_t index) {
    return splitmix64(substream_seed(root, name) + splitmix64(index + 1));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view name) {
    return Rng(substream_seed(root, name));
}

inline Rng make_rng(std::uint64_t root, std::string_view name, std::uint64_t index) {
    return Rng(substream_seed(root, name, index));
}

// Uniform in [lo, hi) from the top 53 bits; independent of the standard
// library's distribution implementation so streams match across toolchains.
inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

inline double standard_normal(Rng& rng) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    double u1 = uniform(rng);
    while (u1 <= 0.0) u1 = uniform(rng);
    const double u2 = uniform(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

template <typename Container>
void shuffle(Container& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace kdiga
