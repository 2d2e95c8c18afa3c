#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cfdbal {

// SplitMix64 finalizer; used to derive independent per-replication seeds from
// (master seed, index) so results do not depend on execution order.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(splitmix64(master) ^ splitmix64(index + 1));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt, std::uint64_t index) {
    return splitmix64(derive_seed(master, salt) ^ splitmix64(index + 0x51ed27f4ULL));
}

// Draws k distinct indices from {0,...,n-1} via partial Fisher-Yates.
// Output is in draw order; deterministic given the engine state.
inline std::vector<int> sample_without_replacement(int n, int k, std::mt19937_64& rng) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<int> pick(i, n - 1);
        int j = pick(rng);
        std::swap(pool[i], pool[j]);
        out[i] = pool[i];
    }
    return out;
}

inline std::vector<int> sample_with_replacement(int n, int k, std::mt19937_64& rng) {
    std::vector<int> out(k);
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int i = 0; i < k; ++i) out[i] = pick(rng);
    return out;
}

}  // namespace cfdbal
