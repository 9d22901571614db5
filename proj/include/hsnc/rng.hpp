#pragma once

#include <cmath>
#include <cstdint>

#include "hsnc/errors.hpp"

namespace hsnc {

// Counter-based pseudo-random generator.
//
// The stream is out_i = mix64(key + i * GOLDEN) where mix64 is the splitmix64
// finalizer and GOLDEN = 0x9E3779B97F4A7C15. State is exactly two 64-bit words
// (key, counter), so a generator can be serialized, restored, and compared
// across runs. split(idx) derives a statistically independent child stream
// with a key that depends on both the parent key and idx.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix64(mix64(seed + kGolden) ^ mix64(stream + kGamma))), counter_(0) {}

    std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    float uniform_float() { return static_cast<float>(uniform()); }

    // Uniform in [lo, hi).
    double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; consumes two draws, keeps no cache so
    // the (key, counter) pair stays the full state.
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    float normal_float() { return static_cast<float>(normal()); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw UsageError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Independent child stream; the parent state is unchanged.
    Rng split(std::uint64_t idx) const {
        Rng child(0);
        child.key_ = mix64(key_ ^ mix64(idx + kGamma));
        child.counter_ = 0;
        return child;
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

    static Rng restore(std::uint64_t key, std::uint64_t counter) {
        Rng r(0);
        r.key_ = key;
        r.counter_ = counter;
        return r;
    }

private:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
    static constexpr std::uint64_t kGamma = 0xD1B54A32D192ED03ull;

    static std::uint64_t mix64(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_;
    std::uint64_t counter_;
};

} // namespace hsnc
