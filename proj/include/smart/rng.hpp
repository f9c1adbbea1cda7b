#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace smart {

// xoshiro256++ stream with splitmix64 seeding. We own the generator and all
// distributions so that replay is bit-identical across platforms and stdlib
// versions; streams for independent purposes are derived from (seed, path)
// rather than drawn sequentially, which makes training steps replayable from
// a checkpoint without serializing generator state.
class RngStream {
  public:
    RngStream() : RngStream(0) {}

    explicit RngStream(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    // Derives an independent stream from a seed and a purpose path, e.g.
    // derive(seed, {kStreamData, step, sample_index}).
    static RngStream derive(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t x = seed ^ 0x9e3779b97f4a7c15ULL;
        for (uint64_t p : path) {
            x = splitmix64(x) ^ (p + 0xbf58476d1ce4e5b9ULL);
            x = splitmix64(x);
        }
        RngStream s;
        for (auto& word : s.state_) word = splitmix64(x);
        return s;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n), n >= 1 (Lemire rejection).
    int uniform_int(int n) {
        const uint64_t bound = static_cast<uint64_t>(n);
        uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * bound;
        auto lo = static_cast<uint64_t>(m);
        if (lo < bound) {
            const uint64_t threshold = (-bound) % bound;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * bound;
                lo = static_cast<uint64_t>(m);
            }
        }
        return static_cast<int>(m >> 64);
    }

    // Standard normal via Box-Muller. Draws two uniforms per call and keeps
    // no cached spare, so the stream state alone determines the sequence.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // k distinct indices from [0, n), in selection order (partial Fisher-Yates).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        if (k > n) k = n;
        for (int i = 0; i < k; ++i) {
            const int j = i + uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

  private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

// Purpose tags for derived streams. Keeping them in one place avoids
// accidental collisions between training-loop consumers.
enum StreamPurpose : uint64_t {
    kStreamData = 1,
    kStreamTeacherDropout = 2,
    kStreamStudentMask = 3,
    kStreamDropPath = 4,
    kStreamInit = 5,
    kStreamAugment = 6,
    kStreamEval = 7,
};

}  // namespace smart
