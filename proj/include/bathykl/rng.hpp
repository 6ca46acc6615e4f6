#pragma once

#include <cmath>
#include <cstdint>

namespace bathykl {

/// SplitMix64 generator. Used everywhere instead of <random> engines so that
/// streams are cheap to fork (hash of seed + indices) and sequences are
/// identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

    /// Standard normal via Box-Muller (cosine branch only, keeps the stream
    /// position independent of past draws).
    double normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t state_;
};

/// Mixes integers into a stream seed. derive_seed(s, a, b) != derive_seed(s, b, a).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    Rng r(seed);
    std::uint64_t h = r.next_u64();
    h ^= Rng(a ^ 0x7f4a7c15ULL).next_u64() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= Rng(b ^ 0x1ce4e5b9ULL).next_u64() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= Rng(c ^ 0x133111ebULL).next_u64() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

}  // namespace bathykl
