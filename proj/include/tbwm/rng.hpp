#pragma once

// Seeded random streams. Sampling is implemented on top of the raw engine
// output (not std::*_distribution) so draws are identical across standard
// libraries and the engine state round-trips through checkpoints exactly.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

namespace tbwm {

class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    void seed(std::uint64_t s) { engine_.seed(s); }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n);

    // Standard normal via Box-Muller (one draw per call, no caching so the
    // stream position is a pure function of the call count).
    double normal();

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    // Index drawn proportionally to the (nonnegative) weights.
    int categorical(std::span<const double> weights);

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates permutation of [0, n).
    std::vector<int> permutation(int n);

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    std::mt19937_64 engine_;
};

// Derives decorrelated child seeds from a root seed (splitmix64 steps).
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream_id);

}  // namespace tbwm
