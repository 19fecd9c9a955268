#ifndef SPVB_MATH_UTIL_HPP
#define SPVB_MATH_UTIL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace spvb {

// Digamma via upward recurrence plus the asymptotic series; good to ~1e-12
// for x > 0, which covers every IG shape this library produces.
inline double digamma(double x) {
    if (!(x > 0.0)) throw std::invalid_argument("digamma: requires x > 0");
    double result = 0.0;
    while (x < 6.0) {
        result -= 1.0 / x;
        x += 1.0;
    }
    double inv = 1.0 / x;
    double inv2 = inv * inv;
    result += std::log(x) - 0.5 * inv;
    result -= inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    return result;
}

// Type-7 empirical quantile (linear interpolation of order statistics).
inline double quantile_type7(std::vector<double> draws, double p) {
    if (draws.empty()) throw std::invalid_argument("quantile: empty sample");
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("quantile: p outside [0,1]");
    std::sort(draws.begin(), draws.end());
    double h = (static_cast<double>(draws.size()) - 1.0) * p;
    std::size_t lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, draws.size() - 1);
    return draws[lo] + (h - std::floor(h)) * (draws[hi] - draws[lo]);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

}  // namespace spvb

#endif
