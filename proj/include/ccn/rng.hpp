#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ccn {

// Deterministic PRNG with hand-rolled distributions. std::mt19937_64 is
// bit-exact by the standard, but the <random> distributions are
// implementation-defined, so we draw doubles ourselves.
class Rng {
  public:
    explicit Rng(uint64_t seed) { state_ = splitmix(seed ? seed : 0x9e3779b97f4a7c15ULL); }

    // Derive an independent stream, e.g. per step or per RANSAC iteration.
    static Rng derive(uint64_t seed, uint64_t stream) {
        return Rng(splitmix(seed + 0x9e3779b97f4a7c15ULL * (stream + 1)));
    }

    uint64_t next_u64() {
        // xorshift64*
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545f4914f6cdd1dULL;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace ccn
