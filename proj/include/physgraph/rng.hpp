#pragma once
// Deterministic counter-based randomness.
//
// Every random draw in the project comes from a stream keyed by explicit
// integers (seed, env index, episode, timestep, ...). Streams are stateless:
// the same key always yields the same values, independent of call order,
// thread count, or library version. That is what makes checkpoint resume and
// fixed-seed reruns bit-exact.

#include <cmath>
#include <cstdint>

namespace physgraph {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Hash-combine an arbitrary list of stream labels into one 64-bit key.
inline std::uint64_t mix_key(std::uint64_t a) { return splitmix64(a); }

template <typename... Rest>
std::uint64_t mix_key(std::uint64_t a, Rest... rest) {
    return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + mix_key(static_cast<std::uint64_t>(rest)...)));
}

// A small counter-based generator over a fixed key.
class Rng {
public:
    explicit Rng(std::uint64_t key) : key_(key) {}

    template <typename... Labels>
    static Rng keyed(Labels... labels) {
        return Rng(mix_key(static_cast<std::uint64_t>(labels)...));
    }

    std::uint64_t next_u64() { return splitmix64(key_ ^ counter_++ * 0xd1342543de82ef95ULL); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (uses two uniforms per pair, caches the spare).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace physgraph
