#pragma once

#include <cstdint>
#include <random>

namespace lyocert {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Derives an independent seed for sub-stream `stream` of a root seed, so
/// rollouts, restarts and sweep cells each get their own reproducible source.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
    std::uint64_t s = root;
    splitmix64(s);
    s ^= 0x9e3779b97f4a7c15ULL * (stream + 1);
    return splitmix64(s);
}

/// mt19937_64 with hand-rolled draws. The engine's output sequence is fixed
/// by the standard; the draw helpers below avoid std::*_distribution, whose
/// results differ between standard-library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform double in [0, 1), 53 bits of entropy.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t below(std::uint64_t bound) { return engine_() % bound; }

private:
    std::mt19937_64 engine_;
};

}  // namespace lyocert
