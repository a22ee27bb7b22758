#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace loclab {

// Deterministic random stream.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The standard distributions are implementation-defined, so every
// derived draw (uniform, normal, integer range, shuffle) is computed here from
// raw 64-bit words. The same seed therefore yields the same stream with any
// conforming standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (one value per call, no caching).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n). Lemire-style rejection keeps it unbiased.
    std::uint64_t below(std::uint64_t n);

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T> void shuffle(std::vector<T> &v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Child stream for sub-task `index`. Results depend only on
    // (seed, index), never on the order in which children are created.
    Rng split(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }

    static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

// splitmix64 finalizer; used for seed derivation and hashing small keys.
std::uint64_t mix64(std::uint64_t x);

} // namespace loclab
