#ifndef SPVB_CONFIG_HPP
#define SPVB_CONFIG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "spvb/spatial.hpp"

namespace spvb {

struct PriorSpec {
    double a_tau = 1.0, b_tau = 1.0;
    double a_sigma = 1.0, b_sigma = 1.0;
    double phi_min = 0.0, phi_max = 0.0;

    void validate() const {
        if (!(a_tau > 0.0)) throw std::invalid_argument("prior: a_tau must be > 0");
        if (!(b_tau > 0.0)) throw std::invalid_argument("prior: b_tau must be > 0");
        if (!(a_sigma > 0.0)) throw std::invalid_argument("prior: a_sigma must be > 0");
        if (!(b_sigma > 0.0)) throw std::invalid_argument("prior: b_sigma must be > 0");
        if (!(phi_min > 0.0)) throw std::invalid_argument("prior: phi_min must be > 0");
        if (!(phi_max > phi_min)) throw std::invalid_argument("prior: phi_max must exceed phi_min");
    }
};

struct FitConfig {
    int m = 15;
    int m_q = 3;
    int n_mc = 30;
    int max_epochs = 1500;
    int batch_size = 0;  // 0 = full batch
    double adadelta_rate = 0.85;
    double adadelta_noise = 1e-6;
    int stop_window = 50;
    int stop_patience = 10;
    std::uint64_t rng_seed = 1;
    double phi_grad_step = 1e-3;

    void validate() const {
        if (m_q < 1) throw std::invalid_argument("config: m_q must be >= 1");
        if (m < m_q) throw std::invalid_argument("config: m must be >= m_q");
        if (n_mc < 1) throw std::invalid_argument("config: n_mc must be >= 1");
        if (max_epochs < 1) throw std::invalid_argument("config: max_epochs must be >= 1");
        if (batch_size < 0) throw std::invalid_argument("config: batch_size must be >= 0");
        if (!(adadelta_rate > 0.0 && adadelta_rate < 1.0)) throw std::invalid_argument("config: adadelta_rate must be in (0,1)");
        if (!(adadelta_noise > 0.0)) throw std::invalid_argument("config: adadelta_noise must be > 0");
        if (stop_window < 1) throw std::invalid_argument("config: stop_window must be >= 1");
        if (stop_patience < 1) throw std::invalid_argument("config: stop_patience must be >= 1");
        if (!(phi_grad_step > 0.0)) throw std::invalid_argument("config: phi_grad_step must be > 0");
    }
};

// Maximum pairwise distance: exhaustive below the brute-force cutoff, convex
// hull diameter (rotating calipers) above it.
inline double max_pairwise_distance(const MatrixXd& coords) {
    int n = static_cast<int>(coords.rows());
    if (n < 2) throw std::invalid_argument("max distance: needs n >= 2");
    constexpr int kExactLimit = 2000;
    if (n <= kExactLimit) {
        double best = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) best = std::max(best, detail::sq_dist(coords, i, j));
        return std::sqrt(best);
    }
    // Andrew monotone chain hull, then all hull pairs (hull is small).
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (coords(a, 0) != coords(b, 0)) return coords(a, 0) < coords(b, 0);
        return coords(a, 1) < coords(b, 1);
    });
    auto cross = [&](int o, int a, int b) {
        return (coords(a, 0) - coords(o, 0)) * (coords(b, 1) - coords(o, 1)) -
               (coords(a, 1) - coords(o, 1)) * (coords(b, 0) - coords(o, 0));
    };
    std::vector<int> hull(2 * static_cast<std::size_t>(n));
    int k = 0;
    for (int ii = 0; ii < n; ++ii) {
        int pi = idx[static_cast<std::size_t>(ii)];
        while (k >= 2 && cross(hull[static_cast<std::size_t>(k - 2)], hull[static_cast<std::size_t>(k - 1)], pi) <= 0) --k;
        hull[static_cast<std::size_t>(k++)] = pi;
    }
    int lower = k + 1;
    for (int ii = n - 2; ii >= 0; --ii) {
        int pi = idx[static_cast<std::size_t>(ii)];
        while (k >= lower && cross(hull[static_cast<std::size_t>(k - 2)], hull[static_cast<std::size_t>(k - 1)], pi) <= 0) --k;
        hull[static_cast<std::size_t>(k++)] = pi;
    }
    hull.resize(static_cast<std::size_t>(std::max(k - 1, 1)));
    double best = 0.0;
    for (std::size_t i = 0; i < hull.size(); ++i)
        for (std::size_t j = i + 1; j < hull.size(); ++j)
            best = std::max(best, detail::sq_dist(coords, hull[i], hull[j]));
    return std::sqrt(best);
}

// Uniform-prior bounds for the decay: correlation at the maximum distance
// falls in (0.05, 0.5), i.e. (3/d_max, 30/d_max).
inline std::pair<double, double> default_phi_bounds(const MatrixXd& coords) {
    double d_max = max_pairwise_distance(coords);
    if (!(d_max > 0.0)) throw std::invalid_argument("phi bounds: all locations identical");
    return {3.0 / d_max, 30.0 / d_max};
}

inline FitConfig default_config(int /*n*/) { return FitConfig{}; }

inline int default_max_epochs_nngp() { return 1500; }
inline int default_max_epochs_mfa() { return 1000; }

}  // namespace spvb

#endif
