#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace uscalib {

/// SplitMix64-style mix of (seed, index) into an independent sub-seed so
/// neighbouring indices decorrelate.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Deterministic random source.  Draws are hand-rolled on top of mt19937_64
/// (std::uniform_real_distribution / std::normal_distribution are
/// implementation-defined, which would break cross-toolchain determinism).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Derive an independent, reproducible stream, e.g. per (seed, index).
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        return Rng(derive_seed(seed, index));
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (no state cached; one value per call).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

  private:
    std::mt19937_64 gen_;
};

}  // namespace uscalib
