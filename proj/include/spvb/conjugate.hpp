#ifndef SPVB_CONJUGATE_HPP
#define SPVB_CONJUGATE_HPP

#include <Eigen/Dense>
#include <Eigen/QR>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>

#include "spvb/config.hpp"
#include "spvb/math_util.hpp"
#include "spvb/optimizer.hpp"
#include "spvb/spatial.hpp"

namespace spvb {

struct BetaPosterior {
    VectorXd mu;   // p
    MatrixXd V;    // p x p

    VectorXd ci_lower() const { return mu - 1.959963984540054 * V.diagonal().cwiseSqrt(); }
    VectorXd ci_upper() const { return mu + 1.959963984540054 * V.diagonal().cwiseSqrt(); }
};

struct InverseGammaPosterior {
    double shape = 1.0;
    double scale = 1.0;

    // shape = inf encodes a plug-in point mass at `scale` (used by mfa-lr).
    bool is_point_mass() const { return std::isinf(shape); }
    double e_inv() const { return is_point_mass() ? 1.0 / scale : shape / scale; }
    double mean() const {
        if (is_point_mass()) return scale;
        return shape > 1.0 ? scale / (shape - 1.0) : std::numeric_limits<double>::quiet_NaN();
    }
    double e_log() const { return std::log(scale) - digamma(shape); }
    double entropy() const { return shape + std::log(scale) + std::lgamma(shape) - (1.0 + shape) * digamma(shape); }
};

struct PhiState {
    double phi = 0.0;
};

// Shared QR of X reused across the conjugate updates. ColPiv detects rank
// deficiency and names the first dependent column.
class DesignDecomposition {
public:
    explicit DesignDecomposition(const MatrixXd& X) : X_(X), qr_(X) {
        if (qr_.rank() < X.cols()) {
            int bad = qr_.colsPermutation().indices()(qr_.rank());
            throw std::invalid_argument("design matrix rank deficient: column " + std::to_string(bad) +
                                        " is linearly dependent on the others");
        }
        xtx_inv_ = (X.transpose() * X).ldlt().solve(MatrixXd::Identity(X.cols(), X.cols()));
    }

    const MatrixXd& X() const { return X_; }
    const MatrixXd& xtx_inv() const { return xtx_inv_; }
    VectorXd solve(const VectorXd& rhs) const { return qr_.solve(rhs); }

    // r^T (I - H) r via one least-squares solve; never forms H.
    double residual_quadratic(const VectorXd& r) const {
        VectorXd fitted = X_ * qr_.solve(r);
        return (r - fitted).squaredNorm();
    }

private:
    MatrixXd X_;
    Eigen::ColPivHouseholderQR<MatrixXd> qr_;
    MatrixXd xtx_inv_;
};

inline BetaPosterior update_beta(const DesignDecomposition& design, const VectorXd& y,
                                 const VectorXd& e_w, double e_inv_tau2) {
    BetaPosterior out;
    out.mu = design.solve(y - e_w);
    out.V = design.xtx_inv() / e_inv_tau2;
    return out;
}

inline BetaPosterior update_beta(const SpatialDataset& data, const VectorXd& e_w, double e_inv_tau2) {
    return update_beta(DesignDecomposition(data.X), data.y, e_w, e_inv_tau2);
}

inline InverseGammaPosterior update_tau2(const DesignDecomposition& design, const VectorXd& y,
                                         const VectorXd& e_w, double trace_vw,
                                         double e_inv_tau2_prev, const PriorSpec& prior) {
    if (trace_vw < 0.0) throw std::invalid_argument("update_tau2: trace must be >= 0");
    int n = static_cast<int>(y.size());
    int p = static_cast<int>(design.X().cols());
    double quad = design.residual_quadratic(y - e_w);
    if (quad < 0.0) {
        std::cerr << "spvb: residual quadratic " << quad << " clamped to 0\n";
        quad = 0.0;
    }
    InverseGammaPosterior out;
    out.shape = prior.a_tau + 0.5 * n;
    out.scale = prior.b_tau + 0.5 * (trace_vw + p / e_inv_tau2_prev + quad);
    return out;
}

inline InverseGammaPosterior update_sigma2(double expected_prior_quadratic, int n, const PriorSpec& prior) {
    if (!(expected_prior_quadratic >= 0.0))
        throw std::invalid_argument("update_sigma2: expected quadratic must be >= 0");
    InverseGammaPosterior out;
    out.shape = prior.a_sigma + 0.5 * n;
    out.scale = prior.b_sigma + 0.5 * expected_prior_quadratic;
    return out;
}

// E_q[(w_i - b w_{N[i]})^2] for the coefficients b of row i at a candidate
// decay. Each variational family supplies its own closure.
using SecondMomentFn = std::function<double(int i, std::span<const int> nbrs, std::span<const double> b)>;

// Point-mass decay objective: 1/2 sum_i [ log(E[1/s2]/F_i) - E[1/s2] q_i / F_i ].
inline double phi_elbo(double phi, const NeighborGraph& graph, const NeighborDistanceCache& cache,
                       double e_inv_sigma2, const PriorSpec& prior, const SecondMomentFn& second_moment) {
    if (phi < prior.phi_min || phi > prior.phi_max) return -std::numeric_limits<double>::infinity();
    NngpFactors f = nngp_factors(cache, phi);
    double total = 0.0;
    for (int i = 0; i < graph.n(); ++i) {
        double q = second_moment(i, graph.neighbors(i), f.row(i));
        total += std::log(e_inv_sigma2 / f.F(i)) - e_inv_sigma2 * q / f.F(i);
    }
    return 0.5 * total;
}

// One AdaDelta ascent step on the decay using a central finite difference
// with relative step h (evaluation points clamped into the prior support).
inline PhiState update_phi(PhiState state, const NeighborGraph& graph, const NeighborDistanceCache& cache,
                           double e_inv_sigma2, const PriorSpec& prior, const SecondMomentFn& second_moment,
                           double phi_grad_step, AdaDeltaState& opt) {
    double h = phi_grad_step * (prior.phi_max - prior.phi_min);
    double lo = std::max(prior.phi_min, state.phi - h);
    double hi = std::min(prior.phi_max, state.phi + h);
    double grad = 0.0;
    if (hi > lo) {
        double f_hi = phi_elbo(hi, graph, cache, e_inv_sigma2, prior, second_moment);
        double f_lo = phi_elbo(lo, graph, cache, e_inv_sigma2, prior, second_moment);
        grad = (f_hi - f_lo) / (hi - lo);
    }
    if (!std::isfinite(grad)) {
        opt.halve();
        return state;
    }
    double delta = opt.step_scalar(grad);
    state.phi = std::clamp(state.phi + delta, prior.phi_min, prior.phi_max);
    return state;
}

}  // namespace spvb

#endif
