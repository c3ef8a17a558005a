#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace tdml {

/// Seeded generator with portable distributions. std::mt19937_64 output is fixed by the
/// standard, but the std distributions are not, so bounded ints, uniforms, normals and
/// shuffles are implemented here on top of the raw engine.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), rejection sampled.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (one value per call, no caching).
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view domain,
                                 std::initializer_list<std::uint64_t> parts = {}) {
    std::uint64_t h = mix64(seed);
    for (char c : domain) h = mix64(h ^ static_cast<std::uint8_t>(c));
    for (auto p : parts) h = mix64(h ^ p);
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view domain, std::string_view tag,
                                 std::initializer_list<std::uint64_t> parts = {}) {
    std::uint64_t h = derive_seed(seed, domain);
    for (char c : tag) h = mix64(h ^ static_cast<std::uint8_t>(c));
    for (auto p : parts) h = mix64(h ^ p);
    return h;
}

} // namespace tdml
