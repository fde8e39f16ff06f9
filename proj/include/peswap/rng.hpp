#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace peswap {

// Counter-based random stream: draw i is a pure function of (seed, stream_id, i),
// so any draw can be replayed and streams can be forked without shared state.
class RngStream {
public:
    static constexpr std::string_view kAlgorithm = "splitmix64-ctr";

    RngStream() : RngStream(0, 0) {}
    explicit RngStream(uint64_t seed, uint64_t stream_id = 0)
        : seed_(seed), stream_(stream_id) {
        base_ = mix(mix(seed + 0x9e3779b97f4a7c15ull) ^ mix(stream_id + 0x632be59bd9b4e019ull));
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream_id() const { return stream_; }
    uint64_t draws() const { return counter_; }

    // Derive an independent stream; (seed, substream) fully determines it.
    RngStream fork(uint64_t substream) const {
        return RngStream(seed_, mix(stream_ ^ (0x9e3779b97f4a7c15ull * (substream + 1))));
    }

    // Value of draw `index` without advancing.
    uint64_t at(uint64_t index) const { return mix(base_ + index * 0x9e3779b97f4a7c15ull); }

    uint64_t next_u64() { return at(counter_++); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe to feed into log().
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes exactly two draws.
    double gaussian() {
        const double u = uniform_pos();
        const double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586476925287 * v);
    }

    // Unbiased integer in [0, n); rejection sampling.
    uint64_t below(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

private:
    static constexpr uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t seed_ = 0;
    uint64_t stream_ = 0;
    uint64_t base_ = 0;
    uint64_t counter_ = 0;
};

} // namespace peswap
