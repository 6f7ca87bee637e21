#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace flowguide {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// PCG32 (O'Neill). Serializable state, cheap deterministic substreams.
// Every stochastic draw in the project goes through this engine so that
// runs are bit-reproducible and checkpoints can persist generator state.
class Pcg32 {
public:
    Pcg32() : Pcg32(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL) {}

    Pcg32(uint64_t seed, uint64_t stream) {
        state_ = 0;
        inc_   = (stream << 1u) | 1u;
        next_u32();
        state_ += splitmix64(seed);
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_       = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot        = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    uint64_t next_u64() {
        uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller, always consuming exactly two uniforms.
    // The sine twin is discarded so the generator carries no hidden cache
    // (a cached spare would break stream splitting and state serialization).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::vector<double> normal_vec(size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n; }

    uint64_t state() const { return state_; }
    uint64_t inc() const { return inc_; }
    void restore(uint64_t state, uint64_t inc) {
        state_ = state;
        inc_   = inc;
    }

private:
    uint64_t state_;
    uint64_t inc_;
};

// Fixed stream tags keep independent random purposes on disjoint substreams
// of one run seed. Per-sample streams add the sample index to a base tag.
namespace rng_stream {
constexpr uint64_t kParamInit   = 0x10;
constexpr uint64_t kTrainLoop   = 0x20;
constexpr uint64_t kEncoder     = 0x30;
constexpr uint64_t kEvalBase    = 0x40;
constexpr uint64_t kSampleNoise = 1ULL << 32;  // + sample index
constexpr uint64_t kSampleInit  = 2ULL << 32;  // + sample index
}  // namespace rng_stream

}  // namespace flowguide
