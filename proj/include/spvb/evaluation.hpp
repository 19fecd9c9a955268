#ifndef SPVB_EVALUATION_HPP
#define SPVB_EVALUATION_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "spvb/report.hpp"
#include "spvb/rng.hpp"
#include "spvb/spatial.hpp"

namespace spvb {

struct SimSpec {
    int n = 1000;
    double domain_side = 10.0;
    VectorXd beta_true = (Eigen::VectorXd(2) << 2.0, 5.0).finished();
    double tau2_true = 0.5;
    double sigma2_true = 10.0;
    double phi_true = 1.0;
    int m_gen = 15;
    std::uint64_t seed = 1;

    void validate() const {
        if (n < 1) throw std::invalid_argument("sim: n must be >= 1");
        if (!(tau2_true >= 0.0 && sigma2_true >= 0.0)) throw std::invalid_argument("sim: variances must be >= 0");
        if (!(phi_true > 0.0)) throw std::invalid_argument("sim: decay must be > 0");
        if (beta_true.size() < 1) throw std::invalid_argument("sim: needs at least one coefficient");
    }
};

// Coordinates uniform on the square, standard-normal covariates, w from the
// NNGP factorization at the true decay, Gaussian noise on top.
inline std::pair<SpatialDataset, VectorXd> simulate(const SimSpec& spec) {
    spec.validate();
    Rng root(spec.seed);
    SpatialDataset data;
    int n = spec.n, p = static_cast<int>(spec.beta_true.size());
    data.coords.resize(n, 2);
    Rng cs = root.derive(stream::sim_coords);
    for (int i = 0; i < n; ++i) {
        data.coords(i, 0) = spec.domain_side * cs.uniform();
        data.coords(i, 1) = spec.domain_side * cs.uniform();
    }
    data.X.resize(n, p);
    Rng xs = root.derive(stream::sim_covariates);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) data.X(i, j) = xs.normal();

    VectorXd w_true(n);
    {
        Rng ws = root.derive(stream::sim_field);
        int m = std::min(spec.m_gen, std::max(n - 1, 1));
        NeighborGraph g = build_neighbor_graph(data.coords, m);
        NngpFactors f = nngp_factors(data.coords, g, spec.phi_true);
        VectorXd w_ord(n);
        for (int i = 0; i < n; ++i) {
            auto nb = g.neighbors(i);
            auto bw = f.row(i);
            double mean = 0.0;
            for (std::size_t s = 0; s < nb.size(); ++s) mean += bw[s] * w_ord(nb[s]);
            w_ord(i) = mean + std::sqrt(spec.sigma2_true * f.F(i)) * ws.normal();
        }
        for (int k = 0; k < n; ++k) w_true(g.order[static_cast<std::size_t>(k)]) = w_ord(k);
    }

    Rng es = root.derive(stream::sim_noise);
    data.y.resize(n);
    double sd = std::sqrt(spec.tau2_true);
    for (int i = 0; i < n; ++i) data.y(i) = data.X.row(i).dot(spec.beta_true) + w_true(i) + sd * es.normal();
    return {std::move(data), std::move(w_true)};
}

struct ReferencePosterior {
    VectorXd mean;  // input order
    MatrixXd cov;   // input order
};

// Exact conditional p(w | y, X, beta, tau2, sigma2, phi) at fixed parameters,
// with the prior covariance taken from the same NNGP graph that generated w.
inline ReferencePosterior reference_posterior(const SpatialDataset& data, const NeighborGraph& graph,
                                              const VectorXd& beta, double tau2, double sigma2, double phi) {
    int n = data.n();
    if (n > 5000)
        throw std::invalid_argument("reference posterior: dense computation capped at n = 5000; evaluate on a subsample");
    NngpFactors f = nngp_factors(data.coords, graph, phi);
    MatrixXd prec = dense_nngp_precision(graph, f) / sigma2;  // C~^{-1}, ordered
    prec.diagonal().array() += 1.0 / tau2;
    Eigen::LLT<MatrixXd> llt(prec);
    if (llt.info() != Eigen::Success) throw std::runtime_error("reference posterior: precision not positive definite");
    MatrixXd cov_ord = llt.solve(MatrixXd::Identity(n, n));
    VectorXd resid_ord(n);
    VectorXd resid = data.y - data.X * beta;
    for (int k = 0; k < n; ++k) resid_ord(k) = resid(graph.order[static_cast<std::size_t>(k)]);
    VectorXd mean_ord = llt.solve(resid_ord / tau2);

    ReferencePosterior ref;
    ref.mean.resize(n);
    ref.cov.resize(n, n);
    const auto& ord = graph.order;
    for (int i = 0; i < n; ++i) {
        ref.mean(ord[static_cast<std::size_t>(i)]) = mean_ord(i);
        for (int j = 0; j < n; ++j) ref.cov(ord[static_cast<std::size_t>(i)], ord[static_cast<std::size_t>(j)]) = cov_ord(i, j);
    }
    return ref;
}

// KL(q || ref) for the covariance representations produced by the fitters.
inline double kl_gaussian(const GaussianSummary& q, const ReferencePosterior& ref) {
    int n = static_cast<int>(ref.mean.size());
    if (q.mean.size() != n) throw std::invalid_argument("kl: dimension mismatch");
    Eigen::LLT<MatrixXd> ref_llt(ref.cov);
    if (ref_llt.info() != Eigen::Success) throw std::invalid_argument("kl: reference covariance not positive definite");
    MatrixXd L = ref_llt.matrixL();
    double logdet_ref = 2.0 * L.diagonal().array().log().sum();

    double trace_term = 0.0, logdet_q = 0.0;
    switch (q.kind) {
        case GaussianSummary::Kind::Diagonal: {
            if (q.diag.size() != n || (q.diag.array() <= 0.0).any())
                throw std::invalid_argument("kl: diagonal covariance must be positive");
            MatrixXd ref_inv = ref_llt.solve(MatrixXd::Identity(n, n));
            trace_term = ref_inv.diagonal().dot(q.diag);
            logdet_q = q.diag.array().log().sum();
            break;
        }
        case GaussianSummary::Kind::SparseFactor: {
            const NngpVariational& v = *q.factor;
            MatrixXd S = dense_sqrt_cov(v);  // ordered space
            // permute into input order
            MatrixXd S_in(n, n);
            const auto& ord = v.graph_q.order;
            for (int k = 0; k < n; ++k) S_in.row(ord[static_cast<std::size_t>(k)]) = S.row(k);
            MatrixXd half = L.triangularView<Eigen::Lower>().solve(S_in);
            trace_term = half.squaredNorm();
            logdet_q = 2.0 * v.gamma.sum();
            break;
        }
        case GaussianSummary::Kind::Dense: {
            Eigen::LLT<MatrixXd> q_llt(q.dense);
            if (q_llt.info() != Eigen::Success) throw std::invalid_argument("kl: q covariance not positive definite");
            MatrixXd Lq = q_llt.matrixL();
            MatrixXd half = L.triangularView<Eigen::Lower>().solve(MatrixXd(Lq));
            trace_term = half.squaredNorm();
            logdet_q = 2.0 * Lq.diagonal().array().log().sum();
            break;
        }
    }
    VectorXd d = ref.mean - q.mean;
    VectorXd half_d = L.triangularView<Eigen::Lower>().solve(d);
    return 0.5 * (trace_term + half_d.squaredNorm() - n + logdet_ref - logdet_q);
}

// Energy-form CRPS over all ordered draw pairs, computed by sorting.
inline double crps_samples(const std::vector<double>& draws, double truth) {
    std::size_t m = draws.size();
    if (m < 2) throw std::invalid_argument("crps: needs at least 2 draws");
    double term1 = 0.0;
    for (double x : draws) term1 += std::abs(x - truth);
    term1 /= static_cast<double>(m);
    std::vector<double> sorted(draws);
    std::sort(sorted.begin(), sorted.end());
    // sum over all ordered pairs |x_i - x_j| = 2 * sum_i (2i + 1 - m) x_(i)
    double pair_sum = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        pair_sum += (2.0 * static_cast<double>(i) + 1.0 - static_cast<double>(m)) * sorted[i];
    double term2 = pair_sum / (static_cast<double>(m) * static_cast<double>(m));
    return term1 - term2;
}

inline double interval_score_95(double lower, double upper, double truth) {
    if (lower > upper) throw std::invalid_argument("interval score: crossed bounds");
    double s = upper - lower;
    if (truth < lower) s += (2.0 / 0.05) * (lower - truth);
    if (truth > upper) s += (2.0 / 0.05) * (truth - upper);
    return s;
}

inline double coverage_95(const std::vector<std::pair<double, double>>& intervals,
                          const std::vector<double>& truths) {
    if (intervals.size() != truths.size()) throw std::invalid_argument("coverage: length mismatch");
    if (intervals.empty()) return 0.0;
    std::size_t inside = 0;
    for (std::size_t i = 0; i < intervals.size(); ++i)
        if (truths[i] >= intervals[i].first && truths[i] <= intervals[i].second) ++inside;
    return static_cast<double>(inside) / static_cast<double>(intervals.size());
}

}  // namespace spvb

#endif
