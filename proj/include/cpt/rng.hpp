#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace cpt::rng {

// All randomness in the project flows through seeds derived with mix(),
// so any sub-computation can be reproduced without replaying the ones
// before it.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ull));
}

inline uint64_t mix(uint64_t a, uint64_t b, uint64_t c) { return mix(mix(a, b), c); }
inline uint64_t mix(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix(mix(a, b, c), d);
}

using Engine = std::mt19937_64;

inline Engine engine(uint64_t seed) { return Engine(splitmix64(seed)); }

// Inclusive range [lo, hi].
inline int uniform_int(Engine& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Engine& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Engine& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

template <typename T>
void shuffle(std::vector<T>& v, Engine& rng) {
    std::shuffle(v.begin(), v.end(), rng);
}

inline std::vector<int> permutation(int n, Engine& rng) {
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    shuffle(p, rng);
    return p;
}

// k distinct indices from [0, n), in draw order.
inline std::vector<int> sample_without_replacement(int n, int k, Engine& rng) {
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k && i < n; ++i) {
        int j = uniform_int(rng, i, n - 1);
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

}  // namespace cpt::rng
