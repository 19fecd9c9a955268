#ifndef SPVB_RNG_HPP
#define SPVB_RNG_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace spvb {

// Splittable counter-style generator built on SplitMix64. Every consumer of
// randomness derives its own stream from (seed, tag...) so draws are
// reproducible independent of thread scheduling or evaluation order.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix_seed(seed)) {}

    // Derive an independent stream keyed by up to three tags.
    Rng derive(std::uint64_t t0, std::uint64_t t1 = 0x9e3779b97f4a7c15ull,
               std::uint64_t t2 = 0xbf58476d1ce4e5b9ull) const {
        std::uint64_t s = state_;
        s = mix_seed(s ^ mix_seed(t0));
        s = mix_seed(s ^ mix_seed(t1));
        s = mix_seed(s ^ mix_seed(t2));
        return Rng(s, true);
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1]; safe as a log() argument.
    double uniform_pos() { return 1.0 - uniform(); }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform_pos();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Gamma(shape, scale=1) via Marsaglia-Tsang squeeze.
    double gamma(double shape) {
        if (!(shape > 0.0)) throw std::invalid_argument("rng: gamma shape must be > 0");
        if (shape < 1.0) {
            double g = gamma(shape + 1.0);
            return g * std::pow(uniform_pos(), 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x, v;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            double u = uniform_pos();
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Inverse gamma with the usual shape/scale parameterization.
    double inverse_gamma(double shape, double scale) { return scale / gamma(shape); }

private:
    Rng(std::uint64_t raw, bool) : state_(raw) {}

    static std::uint64_t mix_seed(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Stream tags used across the fitters so independent consumers never collide.
namespace stream {
inline constexpr std::uint64_t sim_coords = 101;
inline constexpr std::uint64_t sim_covariates = 102;
inline constexpr std::uint64_t sim_field = 103;
inline constexpr std::uint64_t sim_noise = 104;
inline constexpr std::uint64_t fit_mc = 201;       // (epoch, sample)
inline constexpr std::uint64_t fit_mc_beta = 202;  // joint model beta rows
inline constexpr std::uint64_t fit_elbo = 203;     // stopping-rule batch
inline constexpr std::uint64_t batches = 204;      // mini-batch shuffles
inline constexpr std::uint64_t predict = 301;      // (draw)
}  // namespace stream

}  // namespace spvb

#endif
