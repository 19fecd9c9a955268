#ifndef SPVB_INIT_HPP
#define SPVB_INIT_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/spatial.hpp"

namespace spvb {

struct InitEstimates {
    VectorXd beta0;        // OLS coefficients
    VectorXd residuals;    // y - X beta0, input order
    double sigma2 = 1.0;   // spatial variance
    double tau2 = 1.0;     // nugget
    double phi = 1.0;      // decay
    double d0 = 1.0;       // starting variational variance 1/(1/sigma2 + 1/tau2)
};

namespace detail {

// Vecchia log-likelihood of the OLS residuals under the response covariance
// sigma2 * (exp(-phi d) + alpha * I), profiled over sigma2. Returns the
// profiled log-likelihood and the profile variance.
inline std::pair<double, double> vecchia_profile_loglik(const VectorXd& resid_ordered,
                                                        const NeighborGraph& g,
                                                        const NeighborDistanceCache& cache,
                                                        double phi, double alpha) {
    int n = g.n();
    double sum_log_f = 0.0;
    double rss = 0.0;
    for (int i = 0; i < n; ++i) {
        int k = g.degree(i);
        const double* dsite = cache.d_site.data() + cache.ptr[static_cast<std::size_t>(i)];
        const double* dpair = cache.d_pair.data() + cache.tri_ptr[static_cast<std::size_t>(i)];
        double e = resid_ordered(i);
        double f = 1.0 + alpha;
        if (k == 1) {
            double rho = std::exp(-phi * dsite[0]);
            double b = rho / (1.0 + alpha);
            e -= b * resid_ordered(g.neighbors(i)[0]);
            f = (1.0 + alpha) - rho * b;
        } else if (k > 1) {
            Eigen::MatrixXd K(k, k);
            Eigen::VectorXd c0(k);
            int t = 0;
            for (int r = 0; r < k; ++r) {
                K(r, r) = 1.0 + alpha;
                c0(r) = std::exp(-phi * dsite[r]);
                for (int s = 0; s < r; ++s) {
                    double v = std::exp(-phi * dpair[t++]);
                    K(r, s) = v;
                    K(s, r) = v;
                }
            }
            Eigen::VectorXd b = K.llt().solve(c0);
            auto nb = g.neighbors(i);
            for (int s = 0; s < k; ++s) e -= b(s) * resid_ordered(nb[static_cast<std::size_t>(s)]);
            f = (1.0 + alpha) - c0.dot(b);
        }
        sum_log_f += std::log(f);
        rss += e * e / f;
    }
    double sigma2_hat = rss / n;
    double ll = -0.5 * (sum_log_f + n * std::log(sigma2_hat) + n);
    return {ll, sigma2_hat};
}

}  // namespace detail

// Self-contained starting values: OLS residuals for the mean, and a coarse
// profile-likelihood grid over (phi, tau2/sigma2) of the Vecchia response
// model on a subsample of at most 1000 ordered locations.
inline InitEstimates initial_estimates(const SpatialDataset& data, const PriorSpec& prior, int m) {
    InitEstimates out;
    DesignDecomposition design(data.X);
    out.beta0 = design.solve(data.y);
    out.residuals = data.y - data.X * out.beta0;

    int n = data.n();
    if (n < 3) {
        double v = std::max(out.residuals.squaredNorm() / std::max(n, 1), 1e-8);
        out.sigma2 = 0.5 * v;
        out.tau2 = 0.5 * v;
        out.phi = 0.5 * (prior.phi_min + prior.phi_max);
        out.d0 = 1.0 / (1.0 / out.sigma2 + 1.0 / out.tau2);
        return out;
    }

    constexpr int kMaxSubsample = 1000;
    int stride = (n + kMaxSubsample - 1) / kMaxSubsample;
    std::vector<int> order = default_ordering(data.coords);
    std::vector<int> pick;
    for (int k = 0; k < n; k += stride) pick.push_back(order[static_cast<std::size_t>(k)]);
    int ns = static_cast<int>(pick.size());

    MatrixXd sub_coords(ns, 2);
    VectorXd sub_resid(ns);
    for (int k = 0; k < ns; ++k) {
        sub_coords.row(k) = data.coords.row(pick[static_cast<std::size_t>(k)]);
        sub_resid(k) = out.residuals(pick[static_cast<std::size_t>(k)]);
    }
    NeighborGraph g = build_neighbor_graph(sub_coords, std::min(m, std::max(ns - 1, 1)));
    NeighborDistanceCache cache = build_distance_cache(sub_coords, g);
    VectorXd resid_ordered(ns);
    for (int k = 0; k < ns; ++k) resid_ordered(k) = sub_resid(g.order[static_cast<std::size_t>(k)]);

    constexpr int kPhiGrid = 8;
    const double alphas[] = {0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0};
    double best_ll = -std::numeric_limits<double>::infinity();
    for (int gp = 0; gp < kPhiGrid; ++gp) {
        double t = (gp + 0.5) / kPhiGrid;
        double phi = prior.phi_min * std::pow(prior.phi_max / prior.phi_min, t);
        for (double alpha : alphas) {
            auto [ll, s2] = detail::vecchia_profile_loglik(resid_ordered, g, cache, phi, alpha);
            if (ll > best_ll) {
                best_ll = ll;
                out.phi = phi;
                out.sigma2 = s2;
                out.tau2 = alpha * s2;
            }
        }
    }
    out.sigma2 = std::max(out.sigma2, 1e-8);
    out.tau2 = std::max(out.tau2, 1e-8);
    out.d0 = 1.0 / (1.0 / out.sigma2 + 1.0 / out.tau2);
    return out;
}

}  // namespace spvb

#endif
