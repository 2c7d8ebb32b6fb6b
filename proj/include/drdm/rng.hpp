#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace drdm {

// Counter-based generator: every draw is a pure function of (seed, stream
// key, counter), so independent substreams never perturb each other and the
// same key always reproduces the same sequence regardless of platform.

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline constexpr std::uint64_t combine(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

class RngStream {
public:
    RngStream(std::uint64_t seed, std::string_view name, std::uint64_t sub = 0)
        : key_(combine(combine(splitmix64(seed), fnv1a(name)), sub)) {}

    /// Derive an independent child stream.
    RngStream child(std::uint64_t sub) const { return RngStream(combine(key_, sub)); }
    RngStream child(std::string_view name) const { return RngStream(combine(key_, fnv1a(name))); }

    std::uint64_t next_u64() { return splitmix64(key_ ^ splitmix64(counter_++)); }

    /// Uniform in (0, 1), never exactly 0.
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi_exclusive) {
        const auto span = static_cast<std::uint64_t>(hi_exclusive - lo);
        return lo + static_cast<int>(next_u64() % span);
    }

    /// Standard normal via Box-Muller; the paired value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform(), u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

private:
    explicit RngStream(std::uint64_t key) : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace drdm
