#ifndef FDIFF_RNG_HPP
#define FDIFF_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace fdiff {

// PCG32 (O'Neill, pcg-random.org), XSH-RR variant with a fixed stream.
// Word-for-word the reference algorithm so the value sequence is identical
// on every platform at the same seed. `draws` counts emitted 32-bit words.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        seed_ = seed;
        draws_ = 0;
        state_ = 0u;
        next_u32();
        state_ += seed;
        next_u32();
        draws_ = 0;
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + kInc;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        ++draws_;
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    // Uniform in [0, 1), 53-bit resolution from two words.
    double uniform() {
        uint64_t hi = next_u32();
        uint64_t lo = next_u32();
        return static_cast<double>(((hi << 32) | lo) >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), via rejection-free 64-bit scaling.
    uint64_t uniform_index(uint64_t n) {
        return static_cast<uint64_t>(uniform() * static_cast<double>(n));
    }

    // Standard normal via Box-Muller. Each call consumes exactly one uniform
    // pair; no spare is cached, so the draw count per call is fixed.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();  // log(0) guard
        double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Fills in pairs (sin and cos of the same radius), half the uniforms of
    // repeated normal() calls. Still fully determined by (seed, draw count).
    template <typename T>
    void normal_fill(std::vector<T>& out) {
        size_t i = 0;
        while (i + 1 < out.size()) {
            double u1 = uniform();
            double u2 = uniform();
            while (u1 <= 0.0) u1 = uniform();
            double r = std::sqrt(-2.0 * std::log(u1));
            double a = 2.0 * std::numbers::pi * u2;
            out[i++] = static_cast<T>(r * std::cos(a));
            out[i++] = static_cast<T>(r * std::sin(a));
        }
        if (i < out.size()) out[i] = static_cast<T>(normal());
    }

    // Truncated normal: redraw outside +-2 sigma, then scale. Used for init.
    double trunc_normal(double stddev) {
        double v = normal();
        while (v < -2.0 || v > 2.0) v = normal();
        return v * stddev;
    }

    // Independent child stream, e.g. one per sampling chain or record.
    Rng child(uint64_t index) const {
        return Rng(seed_ * 0x9E3779B97F4A7C15ULL + index + 1);
    }

    uint64_t seed() const { return seed_; }
    uint64_t draws() const { return draws_; }

private:
    static constexpr uint64_t kInc = 1442695040888963407ULL;
    uint64_t state_ = 0;
    uint64_t seed_ = 0;
    uint64_t draws_ = 0;
};

}  // namespace fdiff

#endif
