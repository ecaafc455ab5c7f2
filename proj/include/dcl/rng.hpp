#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dcl {

// splitmix64; used both as a generator stage and to derive stream seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Deterministic RNG with explicit state. All draws are defined here rather
/// than via std:: distributions so that streams are reproducible across
/// standard libraries, which the seeded-selection contracts rely on.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // xoshiro256++ seeded through splitmix64
        uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (one value per call, stateless).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform index in [0, n). Lemire multiply-shift; exact for power-of-two n.
    size_t index(size_t n) {
        return static_cast<size_t>((static_cast<__uint128_t>(next()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates shuffle of the whole vector.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    /// Child stream with its own state, decorrelated from this one.
    Rng fork(uint64_t stream) {
        uint64_t s = next() ^ (stream * 0x9E3779B97F4A7C15ULL);
        return Rng(splitmix64(s));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

/// Seed for a named substream of a master seed, without consuming rng state.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    uint64_t s = master ^ (stream * 0xD1B54A32D192ED03ULL);
    return splitmix64(s);
}

}  // namespace dcl
