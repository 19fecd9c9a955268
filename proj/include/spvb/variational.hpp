#ifndef SPVB_VARIATIONAL_HPP
#define SPVB_VARIATIONAL_HPP

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "spvb/parallel.hpp"
#include "spvb/rng.hpp"
#include "spvb/spatial.hpp"

namespace spvb {

// q(w) = N(eta, (I-A)^{-1} D (I-A)^{-T}) with D = diag(exp(2 gamma)) and A
// carrying a[i] in row i over the variational neighbor sets. Everything is
// stored in processing order.
struct NngpVariational {
    VectorXd eta;
    VectorXd gamma;
    std::vector<double> a;  // CSR aligned with graph_q.nbr
    NeighborGraph graph_q;

    int n() const { return static_cast<int>(eta.size()); }
    std::span<const double> a_row(int i) const {
        return {a.data() + graph_q.ptr[i], static_cast<std::size_t>(graph_q.degree(i))};
    }
};

// q(beta, w) over the stacked (p+n) vector; A* = [[L_beta, 0], [A_beta, A]].
struct JointVariational {
    VectorXd mu_beta;        // p
    VectorXd gamma_beta;     // p
    MatrixXd l_beta;         // p x p, strictly lower used
    MatrixXd a_beta;         // n x p
    NngpVariational w;       // eta, gamma, a, graph_q

    int p() const { return static_cast<int>(mu_beta.size()); }
};

// Mean-field q(w) = prod_i N(mu_w[i], exp(J[i])).
struct MfaVariational {
    VectorXd mu_w;
    VectorXd J;

    int n() const { return static_cast<int>(mu_w.size()); }
};

// Forward substitution of (I - A) u = D^{1/2} xi in the processing order.
inline VectorXd sample_u(const NngpVariational& v, const VectorXd& xi) {
    if (xi.size() != v.n()) throw std::invalid_argument("sample_u: xi length mismatch");
    VectorXd u(v.n());
    for (int i = 0; i < v.n(); ++i) {
        double val = std::exp(v.gamma(i)) * xi(i);
        auto nb = v.graph_q.neighbors(i);
        auto ar = v.a_row(i);
        for (std::size_t s = 0; s < nb.size(); ++s) val += ar[s] * u(nb[s]);
        u(i) = val;
    }
    return u;
}

// Stacked back-solve for the joint family: beta rows first, then w rows with
// the dense beta cross terms.
inline void sample_u_joint(const JointVariational& v, const VectorXd& xi_beta, const VectorXd& xi_w,
                           VectorXd& u_beta, VectorXd& u_w) {
    int p = v.p();
    int n = v.w.n();
    u_beta.resize(p);
    for (int j = 0; j < p; ++j) {
        double val = std::exp(v.gamma_beta(j)) * xi_beta(j);
        for (int k = 0; k < j; ++k) val += v.l_beta(j, k) * u_beta(k);
        u_beta(j) = val;
    }
    u_w.resize(n);
    for (int i = 0; i < n; ++i) {
        double val = std::exp(v.w.gamma(i)) * xi_w(i);
        auto nb = v.w.graph_q.neighbors(i);
        auto ar = v.w.a_row(i);
        for (std::size_t s = 0; s < nb.size(); ++s) val += ar[s] * u_w(nb[s]);
        val += v.a_beta.row(i).dot(u_beta);
        u_w(i) = val;
    }
}

// Monte Carlo perturbations: one column per sample.
struct McBatch {
    MatrixXd xi;  // n x n_mc
    MatrixXd u;   // n x n_mc

    int n_samples() const { return static_cast<int>(xi.cols()); }
};

struct JointMcBatch {
    MatrixXd xi_beta, u_beta;  // p x n_mc
    McBatch w;
};

// Draws the epoch batch. Each sample has its own derived stream (one normal
// per location, in processing order) so the batch is identical for any
// thread count.
inline McBatch draw_batch(const NngpVariational& v, const Rng& root, std::uint64_t tag,
                          std::uint64_t epoch_key, int n_mc) {
    McBatch b;
    b.xi.resize(v.n(), n_mc);
    b.u.resize(v.n(), n_mc);
    parallel_chunks(n_mc, [&](int, int lo, int hi) {
        for (int j = lo; j < hi; ++j) {
            Rng stream = root.derive(tag, epoch_key, static_cast<std::uint64_t>(j));
            for (int i = 0; i < v.n(); ++i) b.xi(i, j) = stream.normal();
            b.u.col(j) = sample_u(v, b.xi.col(j));
        }
    }, 1);
    return b;
}

inline JointMcBatch draw_batch_joint(const JointVariational& v, const Rng& root,
                                     std::uint64_t epoch_key, int n_mc) {
    JointMcBatch b;
    int p = v.p(), n = v.w.n();
    b.xi_beta.resize(p, n_mc);
    b.u_beta.resize(p, n_mc);
    b.w.xi.resize(n, n_mc);
    b.w.u.resize(n, n_mc);
    parallel_chunks(n_mc, [&](int, int lo, int hi) {
        for (int j = lo; j < hi; ++j) {
            Rng ws = root.derive(stream::fit_mc, epoch_key, static_cast<std::uint64_t>(j));
            for (int i = 0; i < n; ++i) b.w.xi(i, j) = ws.normal();
            Rng bs = root.derive(stream::fit_mc_beta, epoch_key, static_cast<std::uint64_t>(j));
            for (int k = 0; k < p; ++k) b.xi_beta(k, j) = bs.normal();
            VectorXd ub, uw;
            sample_u_joint(v, b.xi_beta.col(j), b.w.xi.col(j), ub, uw);
            b.u_beta.col(j) = ub;
            b.w.u.col(j) = uw;
        }
    }, 1);
    return b;
}

// r_i = (v_i - b_{N[i]} v_{N[i]}) / F_i, optionally only for rows in the
// mini-batch mask.
inline void factor_residuals(const VectorXd& v, const NeighborGraph& g, const NngpFactors& f,
                             VectorXd& r, const std::vector<char>* mask = nullptr) {
    r.resize(g.n());
    for (int i = 0; i < g.n(); ++i) {
        if (mask && !(*mask)[static_cast<std::size_t>(i)]) {
            r(i) = 0.0;
            continue;
        }
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        double val = v(i);
        for (std::size_t s = 0; s < nb.size(); ++s) val -= bw[s] * v(nb[s]);
        r(i) = val / f.F(i);
    }
}

// out = (I-B)^T r, i.e. out_i = r_i - sum_{l: i in N[l]} b_{N[l],i} r_l.
// With masked residuals this realizes the batch-restricted precision product.
inline void apply_transposed_imb(const VectorXd& r, const NeighborGraph& g, const NngpFactors& f,
                                 VectorXd& out) {
    out = r;
    for (int i = 0; i < g.n(); ++i) {
        auto rows = g.reverse_rows(i);
        auto slots = g.reverse_slots(i);
        double acc = 0.0;
        for (std::size_t s = 0; s < rows.size(); ++s) acc += f.b[static_cast<std::size_t>(f.ptr[rows[s]] + slots[s])] * r(rows[s]);
        out(i) -= acc;
    }
}

// Unit-sill prior precision product Q v with Q = (I-B)^T F^{-1} (I-B).
inline VectorXd apply_prior_precision(const VectorXd& v, const NeighborGraph& g, const NngpFactors& f,
                                      const std::vector<char>* mask = nullptr) {
    VectorXd r, out;
    factor_residuals(v, g, f, r, mask);
    apply_transposed_imb(r, g, f, out);
    return out;
}

// Marginal variances of (I-A)^{-1} D (I-A)^{-T} by transposed unit-triangular
// solves; O(n^2 m_q) total, exact.
inline VectorXd nngp_marginal_variances(const NngpVariational& v) {
    int n = v.n();
    VectorXd out(n);
    VectorXd d2 = (2.0 * v.gamma.array()).exp();
    parallel_chunks(n, [&](int, int lo, int hi) {
        VectorXd z(n);
        for (int i = lo; i < hi; ++i) {
            // solve (I-A)^T z = e_i; support is k <= i
            double acc = 0.0;
            for (int k = i; k >= 0; --k) {
                double val = (k == i) ? 1.0 : 0.0;
                auto rows = v.graph_q.reverse_rows(k);
                auto slots = v.graph_q.reverse_slots(k);
                for (std::size_t s = 0; s < rows.size(); ++s) {
                    int l = rows[s];
                    if (l <= i) val += v.a[static_cast<std::size_t>(v.graph_q.ptr[l] + slots[s])] * z(l);
                }
                z(k) = val;
                acc += val * val * d2(k);
            }
            out(i) = acc;
        }
    }, 16);
    return out;
}

// Dense S = (I-A)^{-1} D^{1/2} for reference computations at small n.
inline MatrixXd dense_sqrt_cov(const NngpVariational& v) {
    int n = v.n();
    MatrixXd S = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        auto nb = v.graph_q.neighbors(i);
        auto ar = v.a_row(i);
        for (std::size_t s = 0; s < nb.size(); ++s) S.row(i).head(i) += ar[s] * S.row(nb[s]).head(i);
        S(i, i) = std::exp(v.gamma(i));
    }
    return S;
}

// Dense sqrt factor of the joint (p+n) family, beta rows first.
inline MatrixXd dense_sqrt_cov_joint(const JointVariational& v) {
    int p = v.p(), n = v.w.n(), N = p + n;
    MatrixXd S = MatrixXd::Zero(N, N);
    for (int j = 0; j < p; ++j) {
        for (int k = 0; k < j; ++k) S.row(j).head(N) += v.l_beta(j, k) * S.row(k).head(N);
        S(j, j) = std::exp(v.gamma_beta(j));
    }
    for (int i = 0; i < n; ++i) {
        int row = p + i;
        auto nb = v.w.graph_q.neighbors(i);
        auto ar = v.w.a_row(i);
        for (std::size_t s = 0; s < nb.size(); ++s) S.row(row) += ar[s] * S.row(p + nb[s]);
        for (int k = 0; k < p; ++k) S.row(row) += v.a_beta(i, k) * S.row(k);
        S(row, row) = std::exp(v.w.gamma(i));
    }
    return S;
}

// Marginal variances of the w block of the joint family, plus Cov(beta).
inline void joint_marginals(const JointVariational& v, VectorXd& w_var, MatrixXd& beta_cov) {
    int p = v.p(), n = v.w.n(), N = p + n;
    VectorXd d2(N);
    for (int j = 0; j < p; ++j) d2(j) = std::exp(2.0 * v.gamma_beta(j));
    for (int i = 0; i < n; ++i) d2(p + i) = std::exp(2.0 * v.w.gamma(i));

    // Cov(beta): small dense block, (I - L)^{-1} D_b (I - L)^{-T}.
    MatrixXd Lb = MatrixXd::Identity(p, p);
    for (int j = 0; j < p; ++j)
        for (int k = 0; k < j; ++k) Lb(j, k) = -v.l_beta(j, k);
    MatrixXd Sb = Lb.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(p, p));
    beta_cov = Sb * d2.head(p).asDiagonal() * Sb.transpose();

    w_var.resize(n);
    parallel_chunks(n, [&](int, int lo, int hi) {
        VectorXd z(N);
        for (int i = lo; i < hi; ++i) {
            int row = p + i;
            double acc = 0.0;
            for (int k = row; k >= 0; --k) {
                double val = (k == row) ? 1.0 : 0.0;
                if (k >= p) {
                    int wk = k - p;
                    auto rows = v.w.graph_q.reverse_rows(wk);
                    auto slots = v.w.graph_q.reverse_slots(wk);
                    for (std::size_t s = 0; s < rows.size(); ++s) {
                        int l = rows[s];
                        if (p + l <= row) val += v.w.a[static_cast<std::size_t>(v.w.graph_q.ptr[l] + slots[s])] * z(p + l);
                    }
                } else {
                    for (int l = k + 1; l < p; ++l) val += v.l_beta(l, k) * z(l);
                    for (int l = 0; l <= i; ++l) val += v.a_beta(l, k) * z(p + l);
                }
                z(k) = val;
                acc += val * val * d2(k);
            }
            w_var(i) = acc;
        }
    }, 16);
}

}  // namespace spvb

#endif
