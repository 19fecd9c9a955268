#ifndef SPVB_VB_NNGP_HPP
#define SPVB_VB_NNGP_HPP

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/elbo.hpp"
#include "spvb/init.hpp"
#include "spvb/optimizer.hpp"
#include "spvb/report.hpp"
#include "spvb/variational.hpp"

namespace spvb {

struct ModelExpectations {
    double e_inv_tau2 = 1.0;
    double e_inv_sigma2 = 1.0;
    VectorXd data_offset;  // y - X E[beta], processing order
};

// Closed-form gradient of the ELBO mean part: the data pull, the own prior
// residual, and the reverse-neighbor back-propagated prior terms. An optional
// mini-batch mask restricts the location sums; scale carries n/|B|.
inline VectorXd grad_eta(const VectorXd& eta, const ModelExpectations& ex, const NeighborGraph& g,
                         const NngpFactors& f, const std::vector<char>* mask = nullptr,
                         double scale = 1.0) {
    VectorXd out = apply_prior_precision(eta, g, f, mask);
    out *= -ex.e_inv_sigma2;
    if (mask) {
        for (int i = 0; i < g.n(); ++i)
            if ((*mask)[static_cast<std::size_t>(i)]) out(i) += ex.e_inv_tau2 * (ex.data_offset(i) - eta(i));
    } else {
        out += ex.e_inv_tau2 * (ex.data_offset - eta);
    }
    return scale * out;
}

// Per-sample gradient of the stochastic ELBO part with respect to u.
inline VectorXd grad_u(const VectorXd& u_col, const ModelExpectations& ex, const NeighborGraph& g,
                       const NngpFactors& f, const std::vector<char>* mask = nullptr) {
    VectorXd out = apply_prior_precision(u_col, g, f, mask);
    out *= -ex.e_inv_sigma2;
    if (mask) {
        for (int i = 0; i < g.n(); ++i)
            if ((*mask)[static_cast<std::size_t>(i)]) out(i) -= ex.e_inv_tau2 * u_col(i);
    } else {
        out -= ex.e_inv_tau2 * u_col;
    }
    return out;
}

// Vanishing-gradient estimate for gamma: keep only the diagonal Jacobian
// entry and the direct variational-neighbor entries, plus the entropy one.
inline VectorXd grad_gamma_vanishing(const NngpVariational& v, const McBatch& batch,
                                     const MatrixXd& grad_u_cols, const std::vector<char>* mask = nullptr,
                                     double scale = 1.0) {
    int n = v.n();
    int n_mc = batch.n_samples();
    VectorXd out = VectorXd::Zero(n);
    for (int j = 0; j < n_mc; ++j) {
        for (int i = 0; i < n; ++i) {
            double chain = grad_u_cols(i, j);
            auto rows = v.graph_q.reverse_rows(i);
            auto slots = v.graph_q.reverse_slots(i);
            for (std::size_t s = 0; s < rows.size(); ++s)
                chain += v.a[static_cast<std::size_t>(v.graph_q.ptr[rows[s]] + slots[s])] * grad_u_cols(rows[s], j);
            out(i) += std::exp(v.gamma(i)) * batch.xi(i, j) * chain;
        }
    }
    out /= static_cast<double>(n_mc);
    if (mask) {
        for (int i = 0; i < n; ++i)
            if ((*mask)[static_cast<std::size_t>(i)]) out(i) += 1.0;
    } else {
        out.array() += 1.0;
    }
    return scale * out;
}

// Vanishing-gradient estimate for the a coefficients: only the direct entry
// u_{N_q[i]} * (grad_u)_i survives.
inline VectorXd grad_a_vanishing(const NngpVariational& v, const McBatch& batch,
                                 const MatrixXd& grad_u_cols, double scale = 1.0) {
    int n = v.n();
    int n_mc = batch.n_samples();
    VectorXd out = VectorXd::Zero(static_cast<int>(v.a.size()));
    for (int j = 0; j < n_mc; ++j) {
        for (int i = 0; i < n; ++i) {
            double gi = grad_u_cols(i, j);
            auto nb = v.graph_q.neighbors(i);
            for (std::size_t s = 0; s < nb.size(); ++s)
                out(v.graph_q.ptr[i] + static_cast<int>(s)) += batch.u(nb[s], j) * gi;
        }
    }
    return (scale / static_cast<double>(n_mc)) * out;
}

// Unbiased estimate of Tr(Cov_q(w)): mean squared norm of the samples.
inline double estimate_trace(const McBatch& batch) {
    if (batch.n_samples() < 1) throw std::invalid_argument("estimate_trace: empty batch");
    return batch.u.squaredNorm() / static_cast<double>(batch.n_samples());
}

// sum_i E[(w_i - b w_N)^2]/F_i with the mean part exact and the u part
// Monte Carlo averaged.
inline double estimate_prior_quadratic(const VectorXd& eta, const McBatch& batch,
                                       const NeighborGraph& g, const NngpFactors& f) {
    int n = g.n();
    int n_mc = batch.n_samples();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        double me = eta(i);
        for (std::size_t s = 0; s < nb.size(); ++s) me -= bw[s] * eta(nb[s]);
        double acc = me * me;
        double mc = 0.0;
        for (int j = 0; j < n_mc; ++j) {
            double r = batch.u(i, j);
            for (std::size_t s = 0; s < nb.size(); ++s) r -= bw[s] * batch.u(nb[s], j);
            mc += r * r;
        }
        total += (acc + mc / n_mc) / f.F(i);
    }
    return total;
}

// Mini-batch gradients for the w parameters: location sums restricted to the
// batch and scaled by n/|B|; reverse-neighbor terms keep only l in B.
struct WGradients {
    VectorXd eta;
    VectorXd gamma;
    VectorXd a;
};

inline WGradients minibatch_elbo_grads(const NngpVariational& v, const ModelExpectations& ex,
                                       const NeighborGraph& g, const NngpFactors& f,
                                       const McBatch& batch, const std::vector<int>& batch_indices) {
    int n = v.n();
    if (batch_indices.empty()) throw std::invalid_argument("minibatch: empty batch");
    bool full = static_cast<int>(batch_indices.size()) == n;
    std::vector<char> mask_store;
    const std::vector<char>* mask = nullptr;
    if (!full) {
        mask_store.assign(static_cast<std::size_t>(n), 0);
        for (int i : batch_indices) mask_store[static_cast<std::size_t>(i)] = 1;
        mask = &mask_store;
    }
    double scale = static_cast<double>(n) / static_cast<double>(batch_indices.size());
    if (full) scale = 1.0;

    WGradients out;
    out.eta = grad_eta(v.eta, ex, g, f, mask, scale);
    MatrixXd gu(n, batch.n_samples());
    for (int j = 0; j < batch.n_samples(); ++j) gu.col(j) = grad_u(batch.u.col(j), ex, g, f, mask);
    out.gamma = grad_gamma_vanishing(v, batch, gu, mask, scale);
    out.a = grad_a_vanishing(v, batch, gu, scale);
    return out;
}

namespace detail {

struct OrderedData {
    MatrixXd X;
    VectorXd y;
    std::vector<int> order;
};

inline OrderedData reorder(const SpatialDataset& data, const std::vector<int>& order) {
    OrderedData od;
    od.order = order;
    od.X.resize(data.X.rows(), data.X.cols());
    od.y.resize(data.y.size());
    for (int k = 0; k < static_cast<int>(order.size()); ++k) {
        od.X.row(k) = data.X.row(order[static_cast<std::size_t>(k)]);
        od.y(k) = data.y(order[static_cast<std::size_t>(k)]);
    }
    return od;
}

inline bool finite(const VectorXd& v) { return v.allFinite(); }

}  // namespace detail

// Full ELBO of the independent-NNGP state with the u-quadratics Monte Carlo
// estimated from `batch`; used for stopping and reporting.
inline double elbo_estimate(const detail::OrderedData& od, const BetaPosterior& beta,
                            const InverseGammaPosterior& qt, const InverseGammaPosterior& qs,
                            const PriorSpec& prior, const NeighborGraph& g, const NngpFactors& f,
                            const NngpVariational& v, const McBatch& batch, const MatrixXd& xtx) {
    int n = g.n();
    double s_data = (od.y - od.X * beta.mu - v.eta).squaredNorm() + (xtx * beta.V).trace() + estimate_trace(batch);
    double pq = estimate_prior_quadratic(v.eta, batch, g, f);
    double entropy = v.gamma.sum() + 0.5 * std::log(beta.V.determinant());
    return elbo_value(n, s_data, pq, f.F.array().log().sum(), entropy, n + static_cast<int>(beta.mu.size()), qt, qs, prior);
}

inline FitReport fit_spvb_nngp(const SpatialDataset& data, PriorSpec prior, FitConfig config) {
    auto t_start = std::chrono::steady_clock::now();
    data.validate();
    config.validate();
    int n = data.n(), p = data.p();
    if (prior.phi_min <= 0.0 && prior.phi_max <= 0.0 && n >= 2) {
        auto [lo, hi] = default_phi_bounds(data.coords);
        prior.phi_min = lo;
        prior.phi_max = hi;
    }
    prior.validate();

    InitEstimates init = initial_estimates(data, prior, std::min(config.m, std::max(n - 1, 1)));
    NeighborGraph graph = build_neighbor_graph(data.coords, config.m);
    NeighborDistanceCache cache = build_distance_cache(data.coords, graph);
    detail::OrderedData od = detail::reorder(data, graph.order);
    DesignDecomposition design(od.X);
    MatrixXd xtx = od.X.transpose() * od.X;

    NngpVariational v;
    v.graph_q = truncate_graph(graph, std::min(config.m_q, graph.m));
    v.eta.resize(n);
    for (int k = 0; k < n; ++k) v.eta(k) = init.residuals(graph.order[static_cast<std::size_t>(k)]);
    v.gamma = VectorXd::Constant(n, 0.5 * std::log(init.d0));
    v.a.assign(v.graph_q.nbr.size(), 0.0);

    PhiState phi{std::clamp(init.phi, prior.phi_min, prior.phi_max)};
    NngpFactors factors = nngp_factors(cache, phi.phi);

    ModelExpectations ex;
    ex.e_inv_tau2 = 1.0 / init.tau2;
    ex.e_inv_sigma2 = 1.0 / init.sigma2;

    AdaDeltaState opt_eta(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_gamma(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_a(static_cast<int>(v.a.size()), config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_phi(1, config.adadelta_rate, config.adadelta_noise);
    StoppingState stop(config.stop_window, config.stop_patience);
    Rng root(config.rng_seed);
    Rng batch_rng = root.derive(stream::batches);

    FitReport rep;
    rep.method = Method::Nngp;
    rep.prior = prior;
    rep.config = config;
    rep.coords = data.coords;
    auto t_init = std::chrono::steady_clock::now();

    BetaPosterior beta;
    InverseGammaPosterior q_tau2{prior.a_tau, prior.b_tau}, q_sigma2{prior.a_sigma, prior.b_sigma};
    int epoch = 1;
    for (; epoch <= config.max_epochs; ++epoch) {
        McBatch batch = draw_batch(v, root, stream::fit_mc, static_cast<std::uint64_t>(epoch) << 20, config.n_mc);

        // Step 1: conjugate beta given the current mean of w.
        double e_inv_tau2_prev = ex.e_inv_tau2;
        beta = update_beta(design, od.y, v.eta, e_inv_tau2_prev);
        ex.data_offset = od.y - od.X * beta.mu;

        // Step 2: tau^2 with the Monte Carlo trace.
        q_tau2 = update_tau2(design, od.y, v.eta, estimate_trace(batch), e_inv_tau2_prev, prior);
        ex.e_inv_tau2 = q_tau2.e_inv();

        // Step 3: sigma^2 with the Monte Carlo prior quadratic.
        q_sigma2 = update_sigma2(estimate_prior_quadratic(v.eta, batch, graph, factors), n, prior);
        ex.e_inv_sigma2 = q_sigma2.e_inv();

        // Step 4: decay by one AdaDelta step on the numerical gradient.
        SecondMomentFn sm = nngp_second_moments(v.eta, batch);
        double phi_before = phi.phi;
        phi = update_phi(phi, graph, cache, ex.e_inv_sigma2, prior, sm, config.phi_grad_step, opt_phi);
        if (phi.phi != phi_before) factors = nngp_factors(cache, phi.phi);

        // Step 5: w parameters, full batch or mini-batches.
        auto batches = make_batches(n, config.batch_size == 0 ? 0 : std::min(config.batch_size, n), batch_rng);
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const McBatch* bptr = &batch;
            McBatch fresh;
            if (batches.size() > 1 && bi > 0) {
                fresh = draw_batch(v, root, stream::fit_mc,
                                   (static_cast<std::uint64_t>(epoch) << 20) + static_cast<std::uint64_t>(bi), config.n_mc);
                bptr = &fresh;
            }
            WGradients grads = minibatch_elbo_grads(v, ex, graph, factors, *bptr, batches[bi]);
            if (detail::finite(grads.eta)) {
                v.eta += opt_eta.step(grads.eta.array()).matrix();
            } else {
                opt_eta.halve();
            }
            if (detail::finite(grads.gamma)) {
                v.gamma += opt_gamma.step(grads.gamma.array()).matrix();
            } else {
                opt_gamma.halve();
            }
            if (detail::finite(grads.a)) {
                Eigen::ArrayXd delta = opt_a.step(grads.a.array());
                for (std::size_t s = 0; s < v.a.size(); ++s) v.a[s] += delta(static_cast<int>(s));
            } else {
                opt_a.halve();
            }
        }

        // Stopping ELBO, evaluated after the epoch's updates.
        McBatch ebatch = draw_batch(v, root, stream::fit_elbo, static_cast<std::uint64_t>(epoch), config.n_mc);
        double elbo = elbo_estimate(od, beta, q_tau2, q_sigma2, prior, graph, factors, v, ebatch, xtx);
        if (!std::isfinite(elbo)) throw std::runtime_error("spvb-nngp: non-finite ELBO at epoch " + std::to_string(epoch));
        rep.elbo_trace.push_back(elbo);
        if (should_stop(stop, elbo)) {
            rep.converged = true;
            break;
        }
    }
    rep.epochs = std::min(epoch, config.max_epochs);

    rep.beta = beta;
    rep.q_tau2 = q_tau2;
    rep.q_sigma2 = q_sigma2;
    rep.phi = phi.phi;
    rep.graph = graph;
    rep.factors = factors;
    rep.nngp = std::make_shared<NngpVariational>(v);

    rep.w_mean.resize(n);
    rep.w_var.resize(n);
    VectorXd mv = nngp_marginal_variances(v);
    for (int k = 0; k < n; ++k) {
        rep.w_mean(graph.order[static_cast<std::size_t>(k)]) = v.eta(k);
        rep.w_var(graph.order[static_cast<std::size_t>(k)]) = mv(k);
    }
    auto t_end = std::chrono::steady_clock::now();
    rep.timings.init_seconds = std::chrono::duration<double>(t_init - t_start).count();
    rep.timings.optimize_seconds = std::chrono::duration<double>(t_end - t_init).count();
    rep.timings.total_seconds = std::chrono::duration<double>(t_end - t_start).count();
    return rep;
}

// ---------------------------------------------------------------------------
// Joint (beta, w) variant.

struct JointGradients {
    VectorXd mu_beta, eta;
    VectorXd gamma_beta;
    MatrixXd l_beta, a_beta;
    VectorXd gamma, a;
};

// Per-sample gradients of the stochastic part with respect to (u_beta, u),
// stacked as in the joint back-solve. The data term couples the blocks.
inline void grad_u_joint(const MatrixXd& X_ord, const ModelExpectations& ex,
                         const NeighborGraph& g, const NngpFactors& f, const VectorXd& u_beta_col,
                         const VectorXd& u_col, VectorXd& g_beta, VectorXd& g_w) {
    VectorXd r = X_ord * u_beta_col + u_col;
    g_w = apply_prior_precision(u_col, g, f);
    g_w = -ex.e_inv_sigma2 * g_w - ex.e_inv_tau2 * r;
    g_beta = -ex.e_inv_tau2 * (X_ord.transpose() * r);
}

inline JointGradients joint_elbo_grads(const JointVariational& v, const MatrixXd& X_ord,
                                       const ModelExpectations& ex, const NeighborGraph& g,
                                       const NngpFactors& f, const JointMcBatch& batch) {
    int n = v.w.n(), p = v.p();
    int n_mc = batch.w.n_samples();
    JointGradients out;

    // Deterministic mean-part gradients.
    VectorXd resid = ex.data_offset - v.w.eta;  // y - X mu_beta - eta
    out.mu_beta = ex.e_inv_tau2 * (X_ord.transpose() * resid);
    out.eta = -ex.e_inv_sigma2 * apply_prior_precision(v.w.eta, g, f) + ex.e_inv_tau2 * resid;

    MatrixXd gw(n, n_mc), gb(p, n_mc);
    for (int j = 0; j < n_mc; ++j) {
        VectorXd gbj, gwj;
        grad_u_joint(X_ord, ex, g, f, batch.u_beta.col(j), batch.w.u.col(j), gbj, gwj);
        gw.col(j) = gwj;
        gb.col(j) = gbj;
    }

    out.gamma = grad_gamma_vanishing(v.w, batch.w, gw);
    out.a = grad_a_vanishing(v.w, batch.w, gw);

    out.gamma_beta = VectorXd::Zero(p);
    out.l_beta = MatrixXd::Zero(p, p);
    out.a_beta = MatrixXd::Zero(n, p);
    for (int j = 0; j < n_mc; ++j) {
        for (int k = 0; k < p; ++k) {
            // chain through the direct children of u_beta_k: later beta rows
            // and every w row.
            double chain = gb(k, j);
            for (int l = k + 1; l < p; ++l) chain += v.l_beta(l, k) * gb(l, j);
            chain += v.a_beta.col(k).dot(gw.col(j));
            out.gamma_beta(k) += std::exp(v.gamma_beta(k)) * batch.xi_beta(k, j) * chain;
            for (int l = k + 1; l < p; ++l) out.l_beta(l, k) += batch.u_beta(k, j) * gb(l, j);
        }
        out.a_beta += gw.col(j) * batch.u_beta.col(j).transpose();
    }
    out.gamma_beta /= static_cast<double>(n_mc);
    out.gamma_beta.array() += 1.0;
    out.l_beta /= static_cast<double>(n_mc);
    out.a_beta /= static_cast<double>(n_mc);
    return out;
}

struct JointOptions {
    // Freezes l_beta, a_beta at zero and handles beta by the conjugate
    // update: the algorithm then reduces to independent spVB-NNGP while
    // exercising the stacked back-solve.
    bool freeze_beta_blocks = false;
};

inline FitReport fit_spvb_nngp_joint(const SpatialDataset& data, PriorSpec prior, FitConfig config,
                                     const JointOptions& options = {}) {
    auto t_start = std::chrono::steady_clock::now();
    data.validate();
    config.validate();
    if (config.batch_size != 0)
        throw std::invalid_argument("spvb-nngp-joint: mini-batching is only supported by the independent fitters");
    int n = data.n(), p = data.p();
    if (prior.phi_min <= 0.0 && prior.phi_max <= 0.0 && n >= 2) {
        auto [lo, hi] = default_phi_bounds(data.coords);
        prior.phi_min = lo;
        prior.phi_max = hi;
    }
    prior.validate();

    InitEstimates init = initial_estimates(data, prior, std::min(config.m, std::max(n - 1, 1)));
    NeighborGraph graph = build_neighbor_graph(data.coords, config.m);
    NeighborDistanceCache cache = build_distance_cache(data.coords, graph);
    detail::OrderedData od = detail::reorder(data, graph.order);
    DesignDecomposition design(od.X);
    MatrixXd xtx = od.X.transpose() * od.X;

    JointVariational v;
    v.w.graph_q = truncate_graph(graph, std::min(config.m_q, graph.m));
    v.w.eta.resize(n);
    for (int k = 0; k < n; ++k) v.w.eta(k) = init.residuals(graph.order[static_cast<std::size_t>(k)]);
    v.w.gamma = VectorXd::Constant(n, 0.5 * std::log(init.d0));
    v.w.a.assign(v.w.graph_q.nbr.size(), 0.0);
    v.mu_beta = init.beta0;
    v.gamma_beta.resize(p);
    MatrixXd xtx_inv = design.xtx_inv();
    for (int k = 0; k < p; ++k) v.gamma_beta(k) = 0.5 * std::log(init.tau2 * xtx_inv(k, k));
    v.l_beta = MatrixXd::Zero(p, p);
    v.a_beta = MatrixXd::Zero(n, p);

    PhiState phi{std::clamp(init.phi, prior.phi_min, prior.phi_max)};
    NngpFactors factors = nngp_factors(cache, phi.phi);

    ModelExpectations ex;
    ex.e_inv_tau2 = 1.0 / init.tau2;
    ex.e_inv_sigma2 = 1.0 / init.sigma2;

    AdaDeltaState opt_mu_beta(p, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_eta(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_gamma(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_a(static_cast<int>(v.w.a.size()), config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_gamma_beta(p, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_l_beta(p * p, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_a_beta(n * p, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_phi(1, config.adadelta_rate, config.adadelta_noise);
    StoppingState stop(config.stop_window, config.stop_patience);
    Rng root(config.rng_seed);

    FitReport rep;
    rep.method = Method::NngpJoint;
    rep.prior = prior;
    rep.config = config;
    rep.coords = data.coords;
    auto t_init = std::chrono::steady_clock::now();

    BetaPosterior beta_conj;
    InverseGammaPosterior q_tau2{prior.a_tau, prior.b_tau}, q_sigma2{prior.a_sigma, prior.b_sigma};
    int epoch = 1;
    for (; epoch <= config.max_epochs; ++epoch) {
        JointMcBatch batch = draw_batch_joint(v, root, static_cast<std::uint64_t>(epoch) << 20, config.n_mc);

        double e_inv_tau2_prev = ex.e_inv_tau2;
        double s_data_u;
        if (options.freeze_beta_blocks) {
            // Reduction mode: conjugate beta exactly as in the independent fit.
            beta_conj = update_beta(design, od.y, v.w.eta, e_inv_tau2_prev);
            v.mu_beta = beta_conj.mu;
            q_tau2 = update_tau2(design, od.y, v.w.eta, estimate_trace(batch.w), e_inv_tau2_prev, prior);
            s_data_u = 0.0;
        } else {
            // Step 2 with the stacked perturbation: E||y - X beta - w||^2 has
            // mean part plus the Monte Carlo mean of ||X u_beta + u||^2.
            s_data_u = 0.0;
            for (int j = 0; j < batch.w.n_samples(); ++j)
                s_data_u += (od.X * batch.u_beta.col(j) + batch.w.u.col(j)).squaredNorm();
            s_data_u /= static_cast<double>(batch.w.n_samples());
            double s_data = (od.y - od.X * v.mu_beta - v.w.eta).squaredNorm() + s_data_u;
            q_tau2.shape = prior.a_tau + 0.5 * n;
            q_tau2.scale = prior.b_tau + 0.5 * s_data;
        }
        ex.e_inv_tau2 = q_tau2.e_inv();
        ex.data_offset = od.y - od.X * v.mu_beta;

        q_sigma2 = update_sigma2(estimate_prior_quadratic(v.w.eta, batch.w, graph, factors), n, prior);
        ex.e_inv_sigma2 = q_sigma2.e_inv();

        SecondMomentFn sm = joint_second_moments(v.w.eta, batch);
        double phi_before = phi.phi;
        phi = update_phi(phi, graph, cache, ex.e_inv_sigma2, prior, sm, config.phi_grad_step, opt_phi);
        if (phi.phi != phi_before) factors = nngp_factors(cache, phi.phi);

        if (options.freeze_beta_blocks) {
            std::vector<int> full_batch(static_cast<std::size_t>(n));
            std::iota(full_batch.begin(), full_batch.end(), 0);
            WGradients grads = minibatch_elbo_grads(v.w, ex, graph, factors, batch.w, full_batch);
            if (detail::finite(grads.eta)) v.w.eta += opt_eta.step(grads.eta.array()).matrix(); else opt_eta.halve();
            if (detail::finite(grads.gamma)) v.w.gamma += opt_gamma.step(grads.gamma.array()).matrix(); else opt_gamma.halve();
            if (detail::finite(grads.a)) {
                Eigen::ArrayXd delta = opt_a.step(grads.a.array());
                for (std::size_t s = 0; s < v.w.a.size(); ++s) v.w.a[s] += delta(static_cast<int>(s));
            } else {
                opt_a.halve();
            }
        } else {
            JointGradients grads = joint_elbo_grads(v, od.X, ex, graph, factors, batch);
            if (detail::finite(grads.mu_beta)) v.mu_beta += opt_mu_beta.step(grads.mu_beta.array()).matrix(); else opt_mu_beta.halve();
            if (detail::finite(grads.eta)) v.w.eta += opt_eta.step(grads.eta.array()).matrix(); else opt_eta.halve();
            if (detail::finite(grads.gamma)) v.w.gamma += opt_gamma.step(grads.gamma.array()).matrix(); else opt_gamma.halve();
            if (detail::finite(grads.a)) {
                Eigen::ArrayXd delta = opt_a.step(grads.a.array());
                for (std::size_t s = 0; s < v.w.a.size(); ++s) v.w.a[s] += delta(static_cast<int>(s));
            } else {
                opt_a.halve();
            }
            if (detail::finite(grads.gamma_beta)) v.gamma_beta += opt_gamma_beta.step(grads.gamma_beta.array()).matrix(); else opt_gamma_beta.halve();
            Eigen::Map<const Eigen::ArrayXd> gl(grads.l_beta.data(), p * p);
            if (gl.isFinite().all()) {
                Eigen::ArrayXd delta = opt_l_beta.step(gl);
                Eigen::Map<Eigen::ArrayXd>(v.l_beta.data(), p * p) += delta;
                for (int r = 0; r < p; ++r)
                    for (int c = r; c < p; ++c) v.l_beta(r, c) = 0.0;
            } else {
                opt_l_beta.halve();
            }
            Eigen::Map<const Eigen::ArrayXd> ga(grads.a_beta.data(), n * p);
            if (ga.isFinite().all()) {
                Eigen::ArrayXd delta = opt_a_beta.step(ga);
                Eigen::Map<Eigen::ArrayXd>(v.a_beta.data(), n * p) += delta;
            } else {
                opt_a_beta.halve();
            }
        }

        // Stopping ELBO after the epoch's updates.
        double elbo;
        if (options.freeze_beta_blocks) {
            McBatch ew = draw_batch(v.w, root, stream::fit_elbo, static_cast<std::uint64_t>(epoch), config.n_mc);
            elbo = elbo_estimate(od, beta_conj, q_tau2, q_sigma2, prior, graph, factors, v.w, ew, xtx);
        } else {
            JointMcBatch ebatch = draw_batch_joint(v, root, (static_cast<std::uint64_t>(epoch) << 20) + 1, config.n_mc);
            double su = 0.0;
            for (int j = 0; j < ebatch.w.n_samples(); ++j)
                su += (od.X * ebatch.u_beta.col(j) + ebatch.w.u.col(j)).squaredNorm();
            su /= static_cast<double>(ebatch.w.n_samples());
            double s_data = (od.y - od.X * v.mu_beta - v.w.eta).squaredNorm() + su;
            double pq = estimate_prior_quadratic(v.w.eta, ebatch.w, graph, factors);
            double entropy = v.w.gamma.sum() + v.gamma_beta.sum();
            elbo = elbo_value(n, s_data, pq, factors.F.array().log().sum(), entropy, n + p, q_tau2, q_sigma2, prior);
        }
        if (!std::isfinite(elbo)) throw std::runtime_error("spvb-nngp-joint: non-finite ELBO at epoch " + std::to_string(epoch));
        rep.elbo_trace.push_back(elbo);
        if (should_stop(stop, elbo)) {
            rep.converged = true;
            break;
        }
    }
    rep.epochs = std::min(epoch, config.max_epochs);

    VectorXd w_var_ordered;
    MatrixXd beta_cov;
    joint_marginals(v, w_var_ordered, beta_cov);
    rep.beta.mu = v.mu_beta;
    rep.beta.V = beta_cov;
    if (options.freeze_beta_blocks) rep.beta = beta_conj;
    rep.q_tau2 = q_tau2;
    rep.q_sigma2 = q_sigma2;
    rep.phi = phi.phi;
    rep.graph = graph;
    rep.factors = factors;
    rep.joint = std::make_shared<JointVariational>(v);

    rep.w_mean.resize(n);
    rep.w_var.resize(n);
    for (int k = 0; k < n; ++k) {
        rep.w_mean(graph.order[static_cast<std::size_t>(k)]) = v.w.eta(k);
        rep.w_var(graph.order[static_cast<std::size_t>(k)]) = w_var_ordered(k);
    }
    auto t_end = std::chrono::steady_clock::now();
    rep.timings.init_seconds = std::chrono::duration<double>(t_init - t_start).count();
    rep.timings.optimize_seconds = std::chrono::duration<double>(t_end - t_init).count();
    rep.timings.total_seconds = std::chrono::duration<double>(t_end - t_start).count();
    return rep;
}

}  // namespace spvb

#endif
