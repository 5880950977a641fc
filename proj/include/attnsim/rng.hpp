#pragma once

// Deterministic random streams. Every stream is keyed by (seed, purpose,
// layer, head, step) through a splitmix64 chain, so component draws are
// independent and reproducible regardless of evaluation order. Doubles are
// built from raw 64-bit draws rather than std::uniform_real_distribution,
// whose output sequence is implementation-defined.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "attnsim/matrix.hpp"

namespace attnsim {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_key(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x853c49e6748fea9bULL;
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

// Stream purposes; combined with seed/layer/head so no two uses collide.
namespace stream {
constexpr std::uint64_t weights = 1;
constexpr std::uint64_t input = 2;
constexpr std::uint64_t permutation = 3;
constexpr std::uint64_t trial = 4;
}  // namespace stream

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t purpose,
                                   std::uint64_t a = 0, std::uint64_t b = 0,
                                   std::uint64_t c = 0) {
    return std::mt19937_64(mix_key({seed, purpose, a, b, c}));
}

// Uniform double in [0, 1): top 53 bits of one draw.
inline double uniform_unit(std::mt19937_64& gen) {
    return double(gen() >> 11) * 0x1.0p-53;
}

inline double uniform_range(std::mt19937_64& gen, double lo, double hi) {
    return lo + (hi - lo) * uniform_unit(gen);
}

inline Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols,
                            double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = uniform_range(gen, lo, hi);
    return m;
}

// Fisher–Yates permutation of 0..n-1.
inline std::vector<std::size_t> random_permutation(std::mt19937_64& gen, std::size_t n) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = gen() % i;
        std::swap(perm[i - 1], perm[j]);
    }
    return perm;
}

}  // namespace attnsim
