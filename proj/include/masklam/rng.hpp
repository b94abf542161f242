#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace masklam {

// splitmix64 step; used for deriving independent stream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministically combine a base seed with stream indices.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = base;
    std::uint64_t h = splitmix64(s);
    s ^= a * 0xD6E8FEB86659FD93ULL;
    h ^= splitmix64(s);
    s ^= b * 0xCA5A826395121157ULL;
    h ^= splitmix64(s);
    return h;
}

// mt19937 with hand-rolled distributions so draws are identical across
// standard-library implementations (std:: distributions are not pinned).
class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

    // uniform in [0, 1)
    double uniform() { return (static_cast<double>(gen_()) + 0.5) * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

    // standard normal via Box-Muller (cosine branch only)
    double gauss() {
        double u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // uniform integer in [0, n), rejection sampled
    std::uint32_t below(std::uint32_t n) {
        const std::uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        std::uint32_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    // Fisher-Yates; std::shuffle ordering is implementation-defined
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = below(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 gen_;
};

}  // namespace masklam
