#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace pspde {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

/// Deterministic random stream addressed by (seed, step, purpose, lane).
/// Each (step, purpose, lane) triple owns an independent stream, so draws do
/// not depend on the order in which per-mode loops are executed.
class RngStream {
  public:
    RngStream(std::uint64_t seed, std::uint64_t step, std::string_view purpose,
              std::uint64_t lane = 0)
        : eng_(mix(seed, step, purpose, lane)) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in (0, 1), never exactly 0.
    double next_uniform() {
        return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller (implementation-pinned, unlike
    /// std::normal_distribution).
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

  private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t step,
                             std::string_view purpose, std::uint64_t lane) {
        std::uint64_t h = detail::splitmix64(seed);
        h = detail::splitmix64(h ^ step);
        h = detail::splitmix64(h ^ detail::fnv1a(purpose));
        h = detail::splitmix64(h ^ lane);
        return h;
    }

    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pspde
