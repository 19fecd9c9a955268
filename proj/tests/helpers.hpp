#ifndef SPVB_TEST_HELPERS_HPP
#define SPVB_TEST_HELPERS_HPP

#include <Eigen/Dense>
#include <cmath>

#include "spvb/spvb.hpp"

namespace spvb_test {

using spvb::MatrixXd;
using spvb::VectorXd;

inline MatrixXd random_coords(int n, spvb::Rng& rng, double side = 10.0) {
    MatrixXd c(n, 2);
    for (int i = 0; i < n; ++i) {
        c(i, 0) = side * rng.uniform();
        c(i, 1) = side * rng.uniform();
    }
    return c;
}

inline spvb::SpatialDataset random_dataset(int n, int p, spvb::Rng& rng, double side = 10.0) {
    spvb::SpatialDataset d;
    d.coords = random_coords(n, rng, side);
    d.X.resize(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) d.X(i, j) = rng.normal();
    d.y.resize(n);
    for (int i = 0; i < n; ++i) d.y(i) = rng.normal();
    return d;
}

// Dense exponential correlation matrix (unit sill).
inline MatrixXd dense_correlation(const MatrixXd& coords, double phi) {
    int n = static_cast<int>(coords.rows());
    MatrixXd C(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double dx = coords(i, 0) - coords(j, 0), dy = coords(i, 1) - coords(j, 1);
            C(i, j) = std::exp(-phi * std::sqrt(dx * dx + dy * dy));
        }
    return C;
}

inline spvb::NngpVariational random_state(const spvb::NeighborGraph& graph, int m_q, spvb::Rng& rng,
                                          double a_scale = 0.4, double gamma_scale = 0.4) {
    spvb::NngpVariational v;
    v.graph_q = spvb::truncate_graph(graph, m_q);
    int n = graph.n();
    v.eta.resize(n);
    v.gamma.resize(n);
    for (int i = 0; i < n; ++i) {
        v.eta(i) = rng.normal();
        v.gamma(i) = gamma_scale * rng.normal();
    }
    v.a.resize(v.graph_q.nbr.size());
    for (auto& x : v.a) x = a_scale * rng.normal();
    return v;
}

// Dense covariance of the variational family.
inline MatrixXd dense_cov(const spvb::NngpVariational& v) {
    MatrixXd S = spvb::dense_sqrt_cov(v);
    return S * S.transpose();
}

// Analytic (dense) counterpart of estimate_prior_quadratic.
inline double analytic_prior_quadratic(const VectorXd& eta, const MatrixXd& Vw,
                                       const spvb::NeighborGraph& g, const spvb::NngpFactors& f) {
    double total = 0.0;
    for (int i = 0; i < g.n(); ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        double me = eta(i);
        for (std::size_t s = 0; s < nb.size(); ++s) me -= bw[s] * eta(nb[s]);
        // E[(u_i - b u_N)^2] = c^T Vw c with c the +/- coefficient vector
        double quad = Vw(i, i);
        for (std::size_t s = 0; s < nb.size(); ++s) {
            quad -= 2.0 * bw[s] * Vw(i, nb[s]);
            for (std::size_t t = 0; t < nb.size(); ++t) quad += bw[s] * bw[t] * Vw(nb[s], nb[t]);
        }
        total += (me * me + quad) / f.F(i);
    }
    return total;
}

// Fully analytic ELBO for an independent-NNGP state (dense covariance).
inline double analytic_elbo_nngp(const VectorXd& y_ord, const MatrixXd& X_ord,
                                 const spvb::BetaPosterior& beta, const spvb::InverseGammaPosterior& qt,
                                 const spvb::InverseGammaPosterior& qs, const spvb::PriorSpec& prior,
                                 const spvb::NeighborGraph& g, const spvb::NngpFactors& f,
                                 const spvb::NngpVariational& v) {
    int n = g.n();
    MatrixXd Vw = dense_cov(v);
    MatrixXd xtx = X_ord.transpose() * X_ord;
    double s_data = (y_ord - X_ord * beta.mu - v.eta).squaredNorm() + (xtx * beta.V).trace() + Vw.trace();
    double pq = analytic_prior_quadratic(v.eta, Vw, g, f);
    double entropy = v.gamma.sum() + 0.5 * std::log(beta.V.determinant());
    return spvb::elbo_value(n, s_data, pq, f.F.array().log().sum(), entropy,
                            n + static_cast<int>(beta.mu.size()), qt, qs, prior);
}

}  // namespace spvb_test

#endif
