// SPDX-License-Identifier: Apache-2.0
//
// Counter-based deterministic generator. The i-th draw of a stream is
// mix(key + i*GAMMA) with the SplitMix64 finalizer (Steele, Lea, Flood 2014
// constants), so identical (seed, stream_id, call sequence) yields
// bit-identical output on every platform: integer arithmetic only, doubles
// built from explicit 53-bit mantissas.
#pragma once

#include <cmath>
#include <cstdint>

namespace dsrt {

class Rng {
public:
    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    Rng() : Rng(0, 0) {}
    Rng(uint64_t seed, uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
        key_ = mix(seed + kGamma) ^ mix(stream_id + 0x6A09E667F3BCC909ull);
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_id_; }

    // Independent child stream; child draws never collide with the parent's.
    Rng stream(uint64_t child_id) const {
        return Rng(mix(key_ + child_id * kGamma), child_id);
    }

    uint64_t next_u64() {
        counter_ += 1;
        return mix(key_ + counter_ * kGamma);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe as a log argument.
    double uniform_pos() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, cosine branch. Always consumes exactly two draws.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

private:
    uint64_t seed_ = 0;
    uint64_t stream_id_ = 0;
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

// FNV-1a over raw bytes; used for config hashes and parameter freeze checks.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

}  // namespace dsrt
