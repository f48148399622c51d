#pragma once

#include <cmath>
#include <cstdint>

namespace vqfr {

// splitmix64 counter-based generator. Every random draw in the project goes
// through this type so that (seed -> stream) is identical across platforms;
// std::mt19937 + std distributions are implementation-defined and are not used.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive bounds. Rejection-free modulo is fine at the ranges used here.
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // One standard normal per call via Box-Muller:
    //   u1 = (next >> 11 + 1) * 2^-53 in (0,1],  u2 = (next >> 11) * 2^-53 in [0,1)
    //   z  = sqrt(-2 ln u1) * cos(2 pi u2)
    // The sine branch is discarded; two u64 draws per normal, fully specified.
    double normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
        double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    // Derived per-item seed: splitmix64 output of (base XOR index).
    static uint64_t derive(uint64_t base, uint64_t index) {
        Rng r(base ^ index);
        return r.next_u64();
    }

private:
    uint64_t state_;
};

}  // namespace vqfr
