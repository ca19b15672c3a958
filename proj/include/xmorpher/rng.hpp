#pragma once

// Seeded RNG with pinned uniform/normal derivations so identical seeds give
// byte-identical streams independent of the standard library.

#include <cmath>
#include <cstdint>
#include <random>

namespace xm {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one fresh pair per call, second value discarded.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586477 * u2);
    }

    std::uint64_t below(std::uint64_t n) { return gen_() % n; }

private:
    std::mt19937_64 gen_;
};

} // namespace xm
