#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace probekit {

// xoshiro256++ with splitmix64 seeding. All pipeline randomness flows through
// this generator so runs are reproducible across platforms and thread counts.
class Rng {
  public:
    static Rng seeded(uint64_t seed) {
        Rng r;
        uint64_t x = seed;
        for (auto& s : r.s_) s = splitmix64(x);
        return r;
    }

    uint64_t next() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive integer range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; consumes two draws per call, no cached spare.
    double normal() {
        const double u1 = static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4] = {};
};

// Hierarchical seed derivation: child streams are keyed by a tag string and an
// index so distinct purposes never share a stream.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index = 0) {
    uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a 64
    for (const char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    uint64_t x = base ^ h;
    uint64_t mixed = Rng::splitmix64(x);
    x = mixed ^ (index * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull);
    return Rng::splitmix64(x);
}

}  // namespace probekit
