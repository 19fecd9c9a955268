#ifndef SPVB_LINEAR_RESPONSE_HPP
#define SPVB_LINEAR_RESPONSE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/report.hpp"
#include "spvb/vb_nngp.hpp"

namespace spvb {

// Drops the later point of every pair whose correlation at the working decay
// reaches the floor; earlier input rows win. Returns the filtered dataset and
// the kept input rows.
inline std::pair<SpatialDataset, std::vector<int>> filter_close_points(const SpatialDataset& data,
                                                                       double phi, double min_corr = 0.99,
                                                                       std::vector<int>* dropped = nullptr) {
    data.validate();
    if (!(phi > 0.0)) throw std::invalid_argument("filter: decay must be > 0");
    if (!(min_corr > 0.0 && min_corr < 1.0)) throw std::invalid_argument("filter: correlation floor must be in (0,1)");
    double d_thr = -std::log(min_corr) / phi;
    int n = data.n();
    std::vector<int> kept;
    kept.reserve(static_cast<std::size_t>(n));
    if (dropped) dropped->clear();

    // Cell grid with cell size d_thr; only neighboring cells can offend.
    double cell = d_thr > 0.0 ? d_thr : 1.0;
    auto key = [&](double x, double y_) {
        auto cx = static_cast<long long>(std::floor(x / cell));
        auto cy = static_cast<long long>(std::floor(y_ / cell));
        return (static_cast<unsigned long long>(cx) << 32) ^ static_cast<unsigned long long>(cy & 0xffffffffll);
    };
    std::unordered_map<unsigned long long, std::vector<int>> grid;
    for (int i = 0; i < n; ++i) {
        double xi = data.coords(i, 0), yi = data.coords(i, 1);
        bool ok = true;
        for (long long dx = -1; dx <= 1 && ok; ++dx)
            for (long long dy = -1; dy <= 1 && ok; ++dy) {
                auto it = grid.find(key(xi + static_cast<double>(dx) * cell, yi + static_cast<double>(dy) * cell));
                if (it == grid.end()) continue;
                for (int j : it->second) {
                    double ddx = xi - data.coords(j, 0), ddy = yi - data.coords(j, 1);
                    if (std::sqrt(ddx * ddx + ddy * ddy) <= d_thr) {
                        ok = false;
                        break;
                    }
                }
            }
        if (ok) {
            kept.push_back(i);
            grid[key(xi, yi)].push_back(i);
        } else if (dropped) {
            dropped->push_back(i);
        }
    }

    SpatialDataset out;
    out.coords.resize(static_cast<int>(kept.size()), 2);
    out.X.resize(static_cast<int>(kept.size()), data.p());
    out.y.resize(static_cast<int>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k) {
        out.coords.row(static_cast<int>(k)) = data.coords.row(kept[k]);
        out.X.row(static_cast<int>(k)) = data.X.row(kept[k]);
        out.y(static_cast<int>(k)) = data.y(kept[k]);
    }
    return {std::move(out), std::move(kept)};
}

// Mean-field optimum with the variance parameters fixed at plug-in values.
// Everything is kept in processing order.
struct LrInputs {
    VectorXd mu_beta;        // p
    VectorXd sigma2_beta;    // p, = tau2 / ||x_j||^2
    VectorXd mu_w;           // n, ordered
    VectorXd G;              // n, ordered
    double tau2 = 1.0, sigma2 = 1.0, phi = 1.0;
    NeighborGraph graph;
    NngpFactors factors;
    MatrixXd X_ord;
    VectorXd y_ord;
};

inline LrInputs fit_mfa_for_lr(const SpatialDataset& data, double tau2, double sigma2, double phi,
                               const FitConfig& config) {
    data.validate();
    if (!(tau2 > 0.0 && sigma2 > 0.0 && phi > 0.0))
        throw std::invalid_argument("lr: fixed variance parameters must be > 0");
    int n = data.n(), p = data.p();

    LrInputs lr;
    lr.tau2 = tau2;
    lr.sigma2 = sigma2;
    lr.phi = phi;
    lr.graph = build_neighbor_graph(data.coords, std::min(config.m, std::max(n - 1, 1)));
    lr.factors = nngp_factors(data.coords, lr.graph, phi);
    detail::OrderedData od = detail::reorder(data, lr.graph.order);
    lr.X_ord = od.X;
    lr.y_ord = od.y;
    DesignDecomposition design(od.X);

    // Closed-form variances at the optimum.
    lr.sigma2_beta.resize(p);
    for (int j = 0; j < p; ++j) lr.sigma2_beta(j) = tau2 / od.X.col(j).squaredNorm();
    lr.G.resize(n);
    for (int i = 0; i < n; ++i) {
        double own = 1.0 / lr.factors.F(i);
        auto rows = lr.graph.reverse_rows(i);
        auto slots = lr.graph.reverse_slots(i);
        for (std::size_t s = 0; s < rows.size(); ++s) {
            double bli = lr.factors.b[static_cast<std::size_t>(lr.factors.ptr[rows[s]] + slots[s])];
            own += bli * bli / lr.factors.F(rows[s]);
        }
        lr.G(i) = 1.0 / (1.0 / tau2 + own / sigma2);
    }

    // Block coordinate ascent on the means: exact beta block, conjugate-
    // gradient solve of the strictly concave w block.
    lr.mu_w = VectorXd::Zero(n);
    lr.mu_beta = design.solve(od.y);
    auto apply_system = [&](const VectorXd& v) {
        return (v / tau2 + apply_prior_precision(v, lr.graph, lr.factors) / sigma2).eval();
    };
    for (int outer = 0; outer < 200; ++outer) {
        VectorXd rhs = (od.y - od.X * lr.mu_beta) / tau2;
        // CG on [(1/tau2) I + (1/sigma2) Q] mu_w = rhs
        VectorXd x = lr.mu_w;
        VectorXd r = rhs - apply_system(x);
        VectorXd d = r;
        double rs = r.squaredNorm();
        double tol = 1e-24 * std::max(rhs.squaredNorm(), 1.0);
        for (int it = 0; it < 4 * n && rs > tol; ++it) {
            VectorXd Ad = apply_system(d);
            double alpha = rs / d.dot(Ad);
            x += alpha * d;
            r -= alpha * Ad;
            double rs_new = r.squaredNorm();
            d = r + (rs_new / rs) * d;
            rs = rs_new;
        }
        lr.mu_w = x;
        VectorXd beta_new = design.solve(od.y - lr.mu_w);
        double change = (beta_new - lr.mu_beta).norm();
        lr.mu_beta = beta_new;
        if (change < 1e-12 * std::max(1.0, lr.mu_beta.norm())) break;
    }
    return lr;
}

// Hessian of the expected log posterior with respect to the mean parameters
// (beta rows first, then w in processing order). The diagonal is exactly
// zero; quadratic moments live in separate sufficient statistics.
inline Eigen::SparseMatrix<double> build_hessian_alpha(const LrInputs& lr) {
    int n = lr.graph.n(), p = static_cast<int>(lr.mu_beta.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(p * p + 2 * n * p + n * (lr.graph.m + 1) * (lr.graph.m + 1)));

    MatrixXd xtx = lr.X_ord.transpose() * lr.X_ord;
    for (int j = 0; j < p; ++j)
        for (int k = 0; k < p; ++k)
            if (j != k) trip.emplace_back(j, k, -xtx(j, k) / lr.tau2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) {
            double v = -lr.X_ord(i, j) / lr.tau2;
            trip.emplace_back(j, p + i, v);
            trip.emplace_back(p + i, j, v);
        }
    double inv_s2 = 1.0 / lr.sigma2;
    for (int i = 0; i < n; ++i) {
        auto nb = lr.graph.neighbors(i);
        auto bw = lr.factors.row(i);
        double invF = 1.0 / lr.factors.F(i);
        for (std::size_t s = 0; s < nb.size(); ++s) {
            double v = inv_s2 * bw[s] * invF;
            trip.emplace_back(p + i, p + nb[s], v);
            trip.emplace_back(p + nb[s], p + i, v);
        }
        // child k = i couples every pair of its parents
        for (std::size_t r = 0; r < nb.size(); ++r)
            for (std::size_t s = 0; s < nb.size(); ++s)
                if (r != s) trip.emplace_back(p + nb[r], p + nb[s], -inv_s2 * bw[r] * bw[s] * invF);
    }
    Eigen::SparseMatrix<double> H(p + n, p + n);
    H.setFromTriplets(trip.begin(), trip.end());
    return H;
}

struct LrCorrected {
    VectorXd diag;        // p+n, beta rows first, w in processing order
    MatrixXd beta_block;  // p x p
    MatrixXd full;        // (p+n) x (p+n) when requested
    bool has_full = false;
};

// Corrected covariance (I - V H)^{-1} V via one sparse LU factorization and
// one solve per requested column.
inline LrCorrected lr_correct(const LrInputs& lr, const Eigen::SparseMatrix<double>& H,
                              const std::vector<int>* columns = nullptr, bool want_full = false) {
    int n = lr.graph.n(), p = static_cast<int>(lr.mu_beta.size());
    int N = p + n;
    VectorXd v_diag(N);
    v_diag.head(p) = lr.sigma2_beta;
    v_diag.tail(n) = lr.G;

    Eigen::SparseMatrix<double> M(N, N);
    {
        Eigen::SparseMatrix<double> VH = v_diag.asDiagonal() * H;
        Eigen::SparseMatrix<double> I(N, N);
        I.setIdentity();
        M = I - VH;
    }
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.analyzePattern(M);
    lu.factorize(M);
    if (lu.info() != Eigen::Success)
        throw std::runtime_error("lr_correct: (I - V H) factorization failed; consider the close-point filter");

    // Cheap conditioning probe: a wildly amplified solve signals a
    // near-singular system.
    {
        VectorXd probe = lu.solve(VectorXd::Ones(N));
        if (!probe.allFinite() || probe.cwiseAbs().maxCoeff() > 1e12)
            throw std::runtime_error("lr_correct: (I - V H) numerically singular; consider the close-point filter");
    }

    LrCorrected out;
    std::vector<int> want;
    if (want_full) {
        want.resize(static_cast<std::size_t>(N));
        std::iota(want.begin(), want.end(), 0);
        out.full.resize(N, N);
        out.has_full = true;
    } else if (columns) {
        want = *columns;
    } else {
        want.resize(static_cast<std::size_t>(N));
        std::iota(want.begin(), want.end(), 0);
    }
    out.diag.setConstant(N, std::numeric_limits<double>::quiet_NaN());
    out.beta_block.setConstant(p, p, std::numeric_limits<double>::quiet_NaN());

    int n_cols = static_cast<int>(want.size());
    std::vector<VectorXd> cols(static_cast<std::size_t>(n_cols));
    parallel_chunks(n_cols, [&](int, int lo, int hi) {
        for (int c = lo; c < hi; ++c) {
            VectorXd rhs = VectorXd::Zero(N);
            rhs(want[static_cast<std::size_t>(c)]) = v_diag(want[static_cast<std::size_t>(c)]);
            cols[static_cast<std::size_t>(c)] = lu.solve(rhs);
        }
    }, 8);
    for (int c = 0; c < n_cols; ++c) {
        int j = want[static_cast<std::size_t>(c)];
        const VectorXd& col = cols[static_cast<std::size_t>(c)];
        out.diag(j) = col(j);
        if (j < p) out.beta_block.col(j) = col.head(p);
        if (out.has_full) out.full.col(j) = col;
    }
    return out;
}

// End-to-end spVB-MFA-LR: close-point filter, fixed-variance mean-field
// optimum, Hessian, and the one-step covariance correction.
inline FitReport fit_spvb_mfa_lr(const SpatialDataset& data, PriorSpec prior, FitConfig config,
                                 bool want_full_cov = false) {
    auto t_start = std::chrono::steady_clock::now();
    data.validate();
    config.validate();
    if (prior.phi_min <= 0.0 && prior.phi_max <= 0.0 && data.n() >= 2) {
        auto [lo, hi] = default_phi_bounds(data.coords);
        prior.phi_min = lo;
        prior.phi_max = hi;
    }
    prior.validate();

    InitEstimates init = initial_estimates(data, prior, std::min(config.m, std::max(data.n() - 1, 1)));
    double phi = std::clamp(init.phi, prior.phi_min, prior.phi_max);
    auto [filtered, kept] = filter_close_points(data, phi);
    auto t_init = std::chrono::steady_clock::now();

    LrInputs lr = fit_mfa_for_lr(filtered, init.tau2, init.sigma2, phi, config);
    Eigen::SparseMatrix<double> H = build_hessian_alpha(lr);
    LrCorrected corr = lr_correct(lr, H, nullptr, want_full_cov);

    int n = filtered.n(), p = filtered.p();
    FitReport rep;
    rep.method = Method::MfaLr;
    rep.prior = prior;
    rep.config = config;
    rep.coords = filtered.coords;
    rep.converged = true;
    rep.epochs = 0;
    rep.beta.mu = lr.mu_beta;
    rep.beta.V = corr.beta_block;
    rep.phi = phi;
    // Plug-in variance parameters, reported as degenerate posteriors.
    rep.q_tau2.shape = std::numeric_limits<double>::infinity();
    rep.q_tau2.scale = init.tau2;
    rep.q_sigma2.shape = std::numeric_limits<double>::infinity();
    rep.q_sigma2.scale = init.sigma2;
    rep.graph = lr.graph;
    rep.factors = lr.factors;
    rep.lr_kept = kept;

    auto mfa = std::make_shared<MfaVariational>();
    mfa->mu_w = lr.mu_w;
    mfa->J = corr.diag.tail(n).array().max(1e-300).log();
    rep.mfa = mfa;

    rep.w_mean.resize(n);
    rep.w_var.resize(n);
    for (int k = 0; k < n; ++k) {
        rep.w_mean(lr.graph.order[static_cast<std::size_t>(k)]) = lr.mu_w(k);
        rep.w_var(lr.graph.order[static_cast<std::size_t>(k)]) = corr.diag(p + k);
    }
    if (corr.has_full) {
        rep.lr_cov.resize(n, n);
        const auto& ord = lr.graph.order;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                rep.lr_cov(ord[static_cast<std::size_t>(i)], ord[static_cast<std::size_t>(j)]) = corr.full(p + i, p + j);
    }
    auto t_end = std::chrono::steady_clock::now();
    rep.timings.init_seconds = std::chrono::duration<double>(t_init - t_start).count();
    rep.timings.optimize_seconds = std::chrono::duration<double>(t_end - t_init).count();
    rep.timings.total_seconds = std::chrono::duration<double>(t_end - t_start).count();
    return rep;
}

}  // namespace spvb

#endif
