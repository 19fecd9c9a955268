#ifndef SPVB_PREDICTION_HPP
#define SPVB_PREDICTION_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "spvb/math_util.hpp"
#include "spvb/parallel.hpp"
#include "spvb/report.hpp"
#include "spvb/rng.hpp"

namespace spvb {

struct PredictionSummary {
    VectorXd mean, variance, lower, upper;  // one entry per new location
};

struct PredictionDraws {
    MatrixXd w_draws;      // n_samples x r
    MatrixXd y_draws;      // n_samples x r
    MatrixXd beta_draws;   // n_samples x p
    MatrixXd noise_draws;  // n_samples x r
    PredictionSummary w_summary, y_summary;
};

namespace detail {

inline PredictionSummary summarize_draws(const MatrixXd& draws) {
    int r = static_cast<int>(draws.cols());
    int m = static_cast<int>(draws.rows());
    PredictionSummary s;
    s.mean.resize(r);
    s.variance.resize(r);
    s.lower.resize(r);
    s.upper.resize(r);
    std::vector<double> col(static_cast<std::size_t>(m));
    for (int j = 0; j < r; ++j) {
        double mu = draws.col(j).mean();
        s.mean(j) = mu;
        s.variance(j) = (draws.col(j).array() - mu).square().sum() / std::max(m - 1, 1);
        for (int i = 0; i < m; ++i) col[static_cast<std::size_t>(i)] = draws(i, j);
        s.lower(j) = quantile_type7(col, 0.025);
        s.upper(j) = quantile_type7(col, 0.975);
    }
    return s;
}

// Unit-sill kriging weights of one new site on its m nearest observed sites.
struct SiteFactors {
    std::vector<int> nbr;   // input-order indices of observed neighbors
    VectorXd b;
    double F_unit = 1.0;
};

inline SiteFactors new_site_factors(const Eigen::RowVector2d& site, const MatrixXd& obs_coords,
                                    int m, double phi) {
    int n = static_cast<int>(obs_coords.rows());
    int k = std::min(m, n);
    std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double dx = site(0) - obs_coords(i, 0), dy = site(1) - obs_coords(i, 1);
        cand[static_cast<std::size_t>(i)] = {dx * dx + dy * dy, i};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    SiteFactors sf;
    sf.nbr.resize(static_cast<std::size_t>(k));
    MatrixXd C(k, k);
    VectorXd c0(k);
    for (int r = 0; r < k; ++r) {
        sf.nbr[static_cast<std::size_t>(r)] = cand[static_cast<std::size_t>(r)].second;
        c0(r) = std::exp(-phi * std::sqrt(cand[static_cast<std::size_t>(r)].first));
        C(r, r) = 1.0;
        for (int s = 0; s < r; ++s) {
            int a = cand[static_cast<std::size_t>(r)].second, bidx = cand[static_cast<std::size_t>(s)].second;
            double dx = obs_coords(a, 0) - obs_coords(bidx, 0), dy = obs_coords(a, 1) - obs_coords(bidx, 1);
            double v = std::exp(-phi * std::sqrt(dx * dx + dy * dy));
            C(r, s) = v;
            C(s, r) = v;
        }
    }
    Eigen::LLT<MatrixXd> llt(C);
    if (llt.info() != Eigen::Success) {
        C.diagonal().array() += 1e-10;
        llt.compute(C);
        if (llt.info() != Eigen::Success) throw std::runtime_error("predict: singular neighbor correlation at new site");
    }
    sf.b = llt.solve(c0);
    sf.F_unit = std::max(1.0 - c0.dot(sf.b), 1e-15);
    return sf;
}

}  // namespace detail

// Posterior draws of w at the observed locations (input order), one row per
// draw. Used by the evaluation metrics.
inline MatrixXd draw_w_posterior(const FitReport& fit, int n_draws, std::uint64_t seed = 777) {
    int n = fit.n();
    MatrixXd out(n_draws, n);
    Rng root(seed);
    parallel_chunks(n_draws, [&](int, int lo, int hi) {
        VectorXd u_beta, u_w;
        for (int l = lo; l < hi; ++l) {
            Rng s = root.derive(stream::predict, 0x5D5Dull, static_cast<std::uint64_t>(l));
            switch (fit.method) {
                case Method::Nngp: {
                    const NngpVariational& v = *fit.nngp;
                    VectorXd xi(n);
                    for (int i = 0; i < n; ++i) xi(i) = s.normal();
                    VectorXd u = sample_u(v, xi);
                    for (int k = 0; k < n; ++k)
                        out(l, v.graph_q.order[static_cast<std::size_t>(k)]) = v.eta(k) + u(k);
                    break;
                }
                case Method::NngpJoint: {
                    const JointVariational& v = *fit.joint;
                    VectorXd xb(v.p()), xw(n);
                    for (int k = 0; k < v.p(); ++k) xb(k) = s.normal();
                    for (int i = 0; i < n; ++i) xw(i) = s.normal();
                    sample_u_joint(v, xb, xw, u_beta, u_w);
                    for (int k = 0; k < n; ++k)
                        out(l, v.w.graph_q.order[static_cast<std::size_t>(k)]) = v.w.eta(k) + u_w(k);
                    break;
                }
                case Method::Mfa:
                case Method::MfaLr:
                    for (int i = 0; i < n; ++i) out(l, i) = fit.w_mean(i) + std::sqrt(fit.w_var(i)) * s.normal();
                    break;
            }
        }
    }, 16);
    return out;
}

// Composition-sampling posterior predictive draws at new locations: sample
// the variational posterior, rebuild the new-site factors per draw, then the
// new-site field and the response.
inline PredictionDraws predict(const FitReport& fit, const MatrixXd& new_coords, const MatrixXd& new_X,
                               int n_samples = 1000, std::uint64_t seed = 12345) {
    if (fit.n() < 1) throw std::invalid_argument("predict: fit has no observed locations");
    if (new_coords.rows() != new_X.rows()) throw std::invalid_argument("predict: coords/X row mismatch");
    if (new_X.cols() != fit.beta.mu.size())
        throw std::invalid_argument("predict: covariate count differs from the fitted model");
    if (n_samples < 1) throw std::invalid_argument("predict: needs n_samples >= 1");
    int r = static_cast<int>(new_coords.rows());
    int n = fit.n();
    int p = static_cast<int>(fit.beta.mu.size());

    // Per-site kriging structure at the point-mass decay.
    std::vector<detail::SiteFactors> site(static_cast<std::size_t>(r));
    for (int j = 0; j < r; ++j)
        site[static_cast<std::size_t>(j)] = detail::new_site_factors(new_coords.row(j), fit.coords, fit.graph.m, fit.phi);

    MatrixXd beta_chol;
    if (fit.method != Method::NngpJoint) {
        Eigen::LLT<MatrixXd> llt(fit.beta.V);
        if (llt.info() != Eigen::Success) throw std::runtime_error("predict: beta covariance not positive definite");
        beta_chol = llt.matrixL();
    }

    PredictionDraws out;
    out.w_draws.resize(n_samples, r);
    out.y_draws.resize(n_samples, r);
    out.beta_draws.resize(n_samples, p);
    out.noise_draws.resize(n_samples, r);

    Rng root(seed);
    parallel_chunks(n_samples, [&](int, int lo, int hi) {
        VectorXd w_obs(n), z(p), u_beta, u_w;
        for (int l = lo; l < hi; ++l) {
            Rng s = root.derive(stream::predict, static_cast<std::uint64_t>(l));
            double tau2 = fit.q_tau2.is_point_mass() ? fit.q_tau2.scale
                                                     : s.inverse_gamma(fit.q_tau2.shape, fit.q_tau2.scale);
            double sigma2 = fit.q_sigma2.is_point_mass() ? fit.q_sigma2.scale
                                                         : s.inverse_gamma(fit.q_sigma2.shape, fit.q_sigma2.scale);
            VectorXd beta(p);
            switch (fit.method) {
                case Method::Nngp: {
                    for (int k = 0; k < p; ++k) z(k) = s.normal();
                    beta = fit.beta.mu + beta_chol * z;
                    const NngpVariational& v = *fit.nngp;
                    VectorXd xi(n);
                    for (int i = 0; i < n; ++i) xi(i) = s.normal();
                    VectorXd u = sample_u(v, xi);
                    for (int k = 0; k < n; ++k)
                        w_obs(v.graph_q.order[static_cast<std::size_t>(k)]) = v.eta(k) + u(k);
                    break;
                }
                case Method::NngpJoint: {
                    const JointVariational& v = *fit.joint;
                    VectorXd xb(p), xw(n);
                    for (int k = 0; k < p; ++k) xb(k) = s.normal();
                    for (int i = 0; i < n; ++i) xw(i) = s.normal();
                    sample_u_joint(v, xb, xw, u_beta, u_w);
                    beta = v.mu_beta + u_beta;
                    for (int k = 0; k < n; ++k)
                        w_obs(v.w.graph_q.order[static_cast<std::size_t>(k)]) = v.w.eta(k) + u_w(k);
                    break;
                }
                case Method::Mfa:
                case Method::MfaLr: {
                    for (int k = 0; k < p; ++k) z(k) = s.normal();
                    beta = fit.beta.mu + beta_chol * z;
                    for (int i = 0; i < n; ++i) w_obs(i) = fit.w_mean(i) + std::sqrt(fit.w_var(i)) * s.normal();
                    break;
                }
            }
            out.beta_draws.row(l) = beta.transpose();
            for (int j = 0; j < r; ++j) {
                const auto& sf = site[static_cast<std::size_t>(j)];
                double mean = 0.0;
                for (std::size_t t = 0; t < sf.nbr.size(); ++t) mean += sf.b(static_cast<int>(t)) * w_obs(sf.nbr[t]);
                double w0 = mean + std::sqrt(sigma2 * sf.F_unit) * s.normal();
                double eps = std::sqrt(tau2) * s.normal();
                out.w_draws(l, j) = w0;
                out.noise_draws(l, j) = eps;
                out.y_draws(l, j) = new_X.row(j).dot(beta) + w0 + eps;
            }
        }
    }, 16);

    out.w_summary = detail::summarize_draws(out.w_draws);
    out.y_summary = detail::summarize_draws(out.y_draws);
    return out;
}

}  // namespace spvb

#endif
