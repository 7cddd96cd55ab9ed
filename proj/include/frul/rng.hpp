#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace frul {

using Rng = std::mt19937_64;

// Unbiased integer in [0, n) by rejection; independent of the standard
// library's distribution implementation so streams match across toolchains.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = Rng::max() - (Rng::max() % n);
    std::uint64_t x = rng();
    while (x >= limit) x = rng();
    return x % n;
}

template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = uniform_index(rng, i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace frul
