#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dune {

// SplitMix64 stream. One 64-bit word of state, serializable, and identical
// on every platform. All randomness in the project flows from a single master
// seed through named sub-streams (init, batching, dropping, kmedoids, ...),
// so each component can be reproduced in isolation.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // modulo bias is negligible for the small n used here, but reject anyway
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // standard normal via Box-Muller (no cached spare: keeps the state one word)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // normal(0, sigma) truncated to +-2 sigma, used for weight init
    double truncated_normal(double sigma) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return z * sigma;
    }

    // k distinct indices drawn uniformly from [0, n)
    std::vector<std::size_t> sample_distinct(std::size_t k, std::size_t n) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k && i < n; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

private:
    std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Derive the seed of a named sub-stream from the master seed.
inline Rng make_stream(std::uint64_t master_seed, std::string_view stream_name) {
    Rng mixer(master_seed ^ fnv1a64(stream_name));
    return Rng(mixer.next_u64());
}

// Seed of the index-th member of a family rooted at `base` (the index-th
// element of base's SplitMix64 output sequence).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    Rng r(base + index * 0x9e3779b97f4a7c15ull);
    return r.next_u64();
}

} // namespace dune
