#include "loclab/rng.hpp"

#include <cmath>
#include <numbers>

namespace loclab {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t Rng::derive_seed(std::uint64_t seed, std::uint64_t index) {
    return mix64(mix64(seed) ^ (index * 0xd1342543de82ef95ULL + 1));
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    // u1 in (0, 1]
    u1 = 1.0 - u1;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // threshold = 2^64 mod n
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const unsigned __int128 m = static_cast<unsigned __int128>(engine_()) * n;
        const auto low = static_cast<std::uint64_t>(m);
        if (low >= threshold) return static_cast<std::uint64_t>(m >> 64);
    }
}

} // namespace loclab
