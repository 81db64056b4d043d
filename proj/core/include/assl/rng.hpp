#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace assl::rng {

/// FNV-1a 64-bit hash. Used for seed derivation and content keys.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

/// Every random draw in a run descends from one run seed. Sub-seeds are
/// derived as seed XOR fnv1a(label) so stages and clusters are independently
/// reproducible no matter which other stages ran before them.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    return base ^ fnv1a(label);
}

/// Deterministic random stream. mt19937_64's raw output sequence is pinned
/// by the standard; the bounded draw below avoids std::uniform_int_distribution,
/// whose mapping is implementation-defined.
class Engine {
public:
    explicit Engine(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next() { return gen_(); }

    /// Unbiased draw in [0, n). n must be > 0.
    std::uint64_t bounded(std::uint64_t n) {
        const std::uint64_t limit = n * (UINT64_MAX / n); // multiple of n
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    /// Draw in [0, 1) with 53 random bits.
    double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

private:
    std::mt19937_64 gen_;
};

/// In-place Fisher-Yates shuffle with the portable bounded draw.
template <typename T>
void shuffle(std::vector<T>& v, Engine& eng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(eng.bounded(i));
        std::swap(v[i - 1], v[j]);
    }
}

/// k distinct indices from [0, n), in pick order (partial Fisher-Yates).
/// k > n returns all n indices in shuffled order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Engine& eng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const std::size_t take = k < n ? k : n;
    for (std::size_t i = 0; i < take; ++i) {
        std::size_t j = i + static_cast<std::size_t>(eng.bounded(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(take);
    return idx;
}

} // namespace assl::rng
