#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace vlalab {

// SplitMix64 counter generator (Steele, Lea, Flood 2014). The state advances by a
// fixed odd increment and every output is a pure mix of the state, so a stream is
// fully described by one u64 — that word is what checkpoints persist. Independent
// streams are derived by hashing (seed, tag, index); all sampling in the project
// goes through this type so dataset and training bytes depend only on seeds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    static Rng from_state(std::uint64_t s) { return Rng(s); }
    std::uint64_t state() const { return state_; }

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n). Modulo bias is < n/2^64, irrelevant at our n.
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

    // One standard normal via Box-Muller (cosine branch only, sine partner
    // discarded). Consumes a data-dependent number of draws only when the
    // first uniform is exactly 0, which the loop rejects.
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    std::uint64_t state_;
};

namespace detail {

inline std::uint64_t splitmix_once(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

} // namespace detail

// Derives a child stream from (base seed, tag, index). Streams with distinct
// tags or indices never collide in practice; tags partition train/test/eval.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = detail::splitmix_once(seed ^ detail::fnv1a64(tag));
    return Rng(detail::splitmix_once(h + 0x632BE59BD9B4E019ULL * (index + 1)));
}

} // namespace vlalab
