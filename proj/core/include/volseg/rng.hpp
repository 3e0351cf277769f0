#pragma once

#include <cmath>
#include <cstdint>

namespace volseg {

/// Counter-based pseudo-random generator.
///
/// State is a 64-bit counter advanced by the SplitMix64 increment; each draw
/// hashes the counter through the SplitMix64 finalizer. Streams derived from
/// (seed, stream-id) pairs are independent and the whole scheme is defined by
/// integer arithmetic only, so sequences are identical on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    /// Derives an independent stream, e.g. Rng::stream(seed, epoch, case_id).
    static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0) {
        Rng r(mix(mix(seed ^ 0x9e3779b97f4a7c15ULL, a), b));
        return r;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t next_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    bool next_bool() { return (next_u64() & 1u) != 0; }

    /// Standard normal via Box-Muller (one value per call; pairs discarded
    /// deterministically).
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Normal(0, sigma) truncated to +-2 sigma by rejection.
    double next_trunc_normal(double sigma) {
        for (;;) {
            double z = next_normal();
            if (z >= -2.0 && z <= 2.0) return z * sigma;
        }
    }

private:
    static uint64_t mix(uint64_t h, uint64_t v) {
        h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h += 0x9e3779b97f4a7c15ULL;
        uint64_t z = h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace volseg
