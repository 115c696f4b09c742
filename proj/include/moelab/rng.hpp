// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace moelab {

// Deterministic PRNG (xoshiro256**). std engines are portable but the std
// distributions are not, so sampling is done by hand to keep corpora and
// initializations byte-identical across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    // Sub-stream derivation: one root seed, independent named streams
    // ("init", "data", ...) so touching one consumer does not perturb others.
    Rng(uint64_t seed, std::string_view stream) : Rng(seed ^ fnv1a(stream)) {}

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    // Uniform integer in [0, n).
    uint64_t next_below(uint64_t n) {
        // Rejection sampling keeps the draw unbiased.
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Box-Muller; one value per call, deterministic call sequence.
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double z = r * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * static_cast<float>(z);
    }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 1469598103934665603ull;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return h;
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Stateless hash for keyed pseudo-random decisions (corpus transitions).
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t x = a * 0x9e3779b97f4a7c15ull + b;
        return splitmix64(x);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

}  // namespace moelab
