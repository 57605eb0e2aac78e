#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace herbert {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Derives the seed of a named sub-stream. Streams are keyed by up to two
/// counters (e.g. step and example index), so any consumer can jump straight
/// to its own stream without advancing a shared generator.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t a = 0,
                                           std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(root ^ fnv1a(name));
    h = splitmix64(h ^ splitmix64(a + 0x632BE59BD9B4E019ULL));
    h = splitmix64(h ^ splitmix64(b + 0x8CB92BA72F3D8DD7ULL));
    return h;
}

/// Seeded random stream. Not thread-safe; give every worker its own.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static Rng stream(std::uint64_t root, std::string_view name, std::uint64_t a = 0, std::uint64_t b = 0) {
        return Rng(derive_seed(root, name, a, b));
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

    double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace herbert
