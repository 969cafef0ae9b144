// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace routelab {

// Deterministic 64-bit PRNG (splitmix64). Used everywhere instead of the
// standard distributions so that seeded results are identical across
// compilers and standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) {
        // Rejection sampling keeps the distribution exact for any n.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return x % n;
    }

    // Standard normal via Box-Muller (no cached spare; one value per call).
    double next_gaussian() {
        double u = 1.0 - next_double();  // (0, 1]
        double v = next_double();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    uint64_t state_;
};

// Derives an independent stream seed from a base seed and a stage tag, so
// that pipeline stages draw from disjoint deterministic streams.
inline uint64_t derive_seed(uint64_t base, uint64_t tag) {
    Rng r(base ^ (0x9e3779b97f4a7c15ULL * (tag + 1)));
    return r.next_u64();
}

}  // namespace routelab
