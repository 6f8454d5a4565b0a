#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace iclp {

// xoshiro256** seeded through splitmix64. Counter-free, serializable state,
// bit-stable across platforms, which is what the determinism contract needs.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
        has_gauss_ = false;
        gauss_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) {
        // modulo bias is irrelevant at our n << 2^64, but keep it exact anyway
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double next_gaussian() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_;
        }
        // Box-Muller
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        gauss_ = r * std::sin(a);
        has_gauss_ = true;
        return r * std::cos(a);
    }

    std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::vector<uint64_t>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
        has_gauss_ = false;
    }

    // derive an independent stream, e.g. per pipeline stage
    Rng fork(uint64_t stream) const {
        uint64_t x = s_[0] ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
        return Rng(x);
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4] = {};
    bool has_gauss_ = false;
    double gauss_ = 0.0;
};

}  // namespace iclp
