// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace comer {

// Splittable counter-based generator built on SplitMix64. Streams derived
// via split() are statistically independent of the parent and of each
// other, so the draw order inside one consumer cannot perturb another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    // Child stream keyed by tag; does not advance this generator.
    Rng split(std::uint64_t tag) const { return Rng(mix(state_ ^ mix(tag + 0x632be59bd9b4e019ull))); }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0, 1).
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo + 1));
    }

    bool bernoulli(double p) { return next_double() < p; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t state_;
};

// Fixed tags for the independent streams a training run draws from.
namespace rng_tag {
constexpr std::uint64_t init = 1;
constexpr std::uint64_t dropout = 2;
constexpr std::uint64_t shuffle = 3;
constexpr std::uint64_t augment = 4;
constexpr std::uint64_t grammar = 5;
constexpr std::uint64_t render = 6;
constexpr std::uint64_t split = 7;
}  // namespace rng_tag

}  // namespace comer
