#ifndef DYAV_CORE_HPP
#define DYAV_CORE_HPP

#include <cstdint>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace dyav {

// Deterministic counter-free RNG: splitmix64 seeding a xoshiro256** stream.
// Same seed gives the same stream on every platform.
struct Rng {
    uint64_t s[4];

    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (int i = 0; i < 4; ++i) s[i] = splitmix64(x);
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t next_u64() {
        uint64_t result = rotl(s[1] * 5, 7) * 9;
        uint64_t t = s[1] << 17;
        s[2] ^= s[0]; s[3] ^= s[1]; s[1] ^= s[2]; s[0] ^= s[3];
        s[2] ^= t; s[3] = rotl(s[3], 45);
        return result;
    }

    // uniform in [0,1)
    float uniform() { return float((next_u64() >> 40) * 0x1.0p-24); }
    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Box-Muller; one value per call, deterministic call order.
    float normal() {
        float u1 = uniform(), u2 = uniform();
        if (u1 < 1e-12f) u1 = 1e-12f;
        return std::sqrt(-2.0f * std::log(u1)) * std::cos(6.28318530717958648f * u2);
    }

    Rng fork() { return Rng(next_u64()); }
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// FNV-1a, used for config hashes and freeze audits.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) { h ^= p[i]; h *= 0x100000001b3ull; }
    return h;
}
inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline bool finite_all(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

} // namespace dyav

#endif
