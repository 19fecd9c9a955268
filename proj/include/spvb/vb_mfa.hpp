#ifndef SPVB_VB_MFA_HPP
#define SPVB_VB_MFA_HPP

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/elbo.hpp"
#include "spvb/init.hpp"
#include "spvb/optimizer.hpp"
#include "spvb/report.hpp"
#include "spvb/vb_nngp.hpp"

namespace spvb {

// Closed-form gradient for the mean-field mean, same structure as grad_eta.
inline VectorXd grad_mu_w(const MfaVariational& v, const ModelExpectations& ex, const NeighborGraph& g,
                          const NngpFactors& f, const std::vector<char>* mask = nullptr,
                          double scale = 1.0) {
    return grad_eta(v.mu_w, ex, g, f, mask, scale);
}

// Gradient for the log-variances J; entirely closed form.
inline VectorXd grad_J(const MfaVariational& v, const ModelExpectations& ex, const NeighborGraph& g,
                       const NngpFactors& f, const std::vector<char>* mask = nullptr,
                       double scale = 1.0) {
    int n = v.n();
    VectorXd out(n);
    // 1/F_i + sum over parents l of b_{N[l],i}^2 / F_l, batch-restricted on l.
    for (int i = 0; i < n; ++i) {
        double own = 0.0;
        bool in_batch = !mask || (*mask)[static_cast<std::size_t>(i)];
        if (in_batch) own = 1.0 / f.F(i);
        auto rows = g.reverse_rows(i);
        auto slots = g.reverse_slots(i);
        double rev = 0.0;
        for (std::size_t s = 0; s < rows.size(); ++s) {
            int l = rows[s];
            if (mask && !(*mask)[static_cast<std::size_t>(l)]) continue;
            double bli = f.b[static_cast<std::size_t>(f.ptr[l] + slots[s])];
            rev += bli * bli / f.F(l);
        }
        double bracket = -0.5 * (in_batch ? ex.e_inv_tau2 : 0.0) - 0.5 * ex.e_inv_sigma2 * (own + rev);
        out(i) = (bracket + (in_batch ? 0.5 * std::exp(-v.J(i)) : 0.0)) * std::exp(v.J(i));
    }
    return scale * out;
}

// Exact expected prior quadratic under the mean-field family.
inline double mfa_prior_quadratic(const MfaVariational& v, const NeighborGraph& g, const NngpFactors& f) {
    double total = 0.0;
    for (int i = 0; i < g.n(); ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        double me = v.mu_w(i);
        double var = std::exp(v.J(i));
        for (std::size_t s = 0; s < nb.size(); ++s) {
            me -= bw[s] * v.mu_w(nb[s]);
            var += bw[s] * bw[s] * std::exp(v.J(nb[s]));
        }
        total += (me * me + var) / f.F(i);
    }
    return total;
}

// Fully analytic mean-field ELBO; no Monte Carlo anywhere.
inline double mfa_elbo(const VectorXd& y_ord, const MatrixXd& X_ord, const BetaPosterior& beta,
                       const InverseGammaPosterior& qt, const InverseGammaPosterior& qs,
                       const PriorSpec& prior, const NeighborGraph& g, const NngpFactors& f,
                       const MfaVariational& v, const MatrixXd& xtx) {
    int n = g.n();
    double s_data = (y_ord - X_ord * beta.mu - v.mu_w).squaredNorm() + (xtx * beta.V).trace() +
                    v.J.array().exp().sum();
    double entropy = 0.5 * v.J.sum() + 0.5 * std::log(beta.V.determinant());
    return elbo_value(n, s_data, mfa_prior_quadratic(v, g, f), f.F.array().log().sum(), entropy,
                      n + static_cast<int>(beta.mu.size()), qt, qs, prior);
}

inline FitReport fit_spvb_mfa(const SpatialDataset& data, PriorSpec prior, FitConfig config) {
    auto t_start = std::chrono::steady_clock::now();
    data.validate();
    config.validate();
    int n = data.n();
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

    MfaVariational v;
    v.mu_w.resize(n);
    for (int k = 0; k < n; ++k) v.mu_w(k) = init.residuals(graph.order[static_cast<std::size_t>(k)]);
    v.J = VectorXd::Constant(n, std::log(init.d0));

    PhiState phi{std::clamp(init.phi, prior.phi_min, prior.phi_max)};
    NngpFactors factors = nngp_factors(cache, phi.phi);

    ModelExpectations ex;
    ex.e_inv_tau2 = 1.0 / init.tau2;
    ex.e_inv_sigma2 = 1.0 / init.sigma2;

    AdaDeltaState opt_mu(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_J(n, config.adadelta_rate, config.adadelta_noise);
    AdaDeltaState opt_phi(1, config.adadelta_rate, config.adadelta_noise);
    StoppingState stop(config.stop_window, config.stop_patience);
    Rng batch_rng = Rng(config.rng_seed).derive(stream::batches);

    FitReport rep;
    rep.method = Method::Mfa;
    rep.prior = prior;
    rep.config = config;
    rep.coords = data.coords;
    auto t_init = std::chrono::steady_clock::now();

    BetaPosterior beta;
    InverseGammaPosterior q_tau2{prior.a_tau, prior.b_tau}, q_sigma2{prior.a_sigma, prior.b_sigma};
    int epoch = 1;
    for (; epoch <= config.max_epochs; ++epoch) {
        double e_inv_tau2_prev = ex.e_inv_tau2;
        beta = update_beta(design, od.y, v.mu_w, e_inv_tau2_prev);
        ex.data_offset = od.y - od.X * beta.mu;

        q_tau2 = update_tau2(design, od.y, v.mu_w, v.J.array().exp().sum(), e_inv_tau2_prev, prior);
        ex.e_inv_tau2 = q_tau2.e_inv();

        q_sigma2 = update_sigma2(mfa_prior_quadratic(v, graph, factors), n, prior);
        ex.e_inv_sigma2 = q_sigma2.e_inv();

        SecondMomentFn sm = mfa_second_moments(v.mu_w, v.J);
        double phi_before = phi.phi;
        phi = update_phi(phi, graph, cache, ex.e_inv_sigma2, prior, sm, config.phi_grad_step, opt_phi);
        if (phi.phi != phi_before) factors = nngp_factors(cache, phi.phi);

        auto batches = make_batches(n, config.batch_size == 0 ? 0 : std::min(config.batch_size, n), batch_rng);
        for (const auto& bidx : batches) {
            bool full = static_cast<int>(bidx.size()) == n;
            std::vector<char> mask_store;
            const std::vector<char>* mask = nullptr;
            double scale = 1.0;
            if (!full) {
                mask_store.assign(static_cast<std::size_t>(n), 0);
                for (int i : bidx) mask_store[static_cast<std::size_t>(i)] = 1;
                mask = &mask_store;
                scale = static_cast<double>(n) / static_cast<double>(bidx.size());
            }
            VectorXd gm = grad_mu_w(v, ex, graph, factors, mask, scale);
            if (detail::finite(gm)) v.mu_w += opt_mu.step(gm.array()).matrix(); else opt_mu.halve();
            VectorXd gj = grad_J(v, ex, graph, factors, mask, scale);
            if (detail::finite(gj)) v.J += opt_J.step(gj.array()).matrix(); else opt_J.halve();
        }

        double elbo = mfa_elbo(od.y, od.X, beta, q_tau2, q_sigma2, prior, graph, factors, v, xtx);
        if (!std::isfinite(elbo)) throw std::runtime_error("spvb-mfa: non-finite ELBO at epoch " + std::to_string(epoch));
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
    rep.mfa = std::make_shared<MfaVariational>(v);

    rep.w_mean.resize(n);
    rep.w_var.resize(n);
    for (int k = 0; k < n; ++k) {
        rep.w_mean(graph.order[static_cast<std::size_t>(k)]) = v.mu_w(k);
        rep.w_var(graph.order[static_cast<std::size_t>(k)]) = std::exp(v.J(k));
    }
    auto t_end = std::chrono::steady_clock::now();
    rep.timings.init_seconds = std::chrono::duration<double>(t_init - t_start).count();
    rep.timings.optimize_seconds = std::chrono::duration<double>(t_end - t_init).count();
    rep.timings.total_seconds = std::chrono::duration<double>(t_end - t_start).count();
    return rep;
}

}  // namespace spvb

#endif
