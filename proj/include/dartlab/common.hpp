#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dartlab {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void check_runtime(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// Deterministic 64-bit generator (splitmix64 seeding an xorshift-style core).
// All randomness in the library flows through this so runs are reproducible
// to the bit from explicit seeds, independent of the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        // splitmix64 expansion of the seed into internal state
        std::uint64_t z = seed;
        for (auto& s : state_) {
            z += 0x9e3779b97f4a7c15ULL;
            std::uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
            s = x ^ (x >> 31);
        }
        if (state_[0] == 0 && state_[1] == 0) state_[0] = 1;
    }

    std::uint64_t next_u64() {
        // xoroshiro128+
        std::uint64_t s0 = state_[0];
        std::uint64_t s1 = state_[1];
        std::uint64_t result = s0 + s1;
        s1 ^= s0;
        state_[0] = rotl(s0, 24) ^ s1 ^ (s1 << 16);
        state_[1] = rotl(s1, 37);
        return result;
    }

    // Uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (two draws per call, no cached spare)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        std::uint64_t threshold = (0 - n) % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t state_[2];
};

// Derives an independent seed for a named substream (e.g. "source-batches").
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    std::uint64_t z = base ^ h;
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace dartlab
