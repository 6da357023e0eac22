#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ilora {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derives an independent seed for a labeled stream ("init", "data", "select", "train").
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
    return mix64(root ^ mix64(fnv1a(label)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label, std::uint64_t index) {
    return mix64(derive_seed(root, label) + mix64(index + 1));
}

using Rng = std::mt19937_64;

} // namespace ilora
