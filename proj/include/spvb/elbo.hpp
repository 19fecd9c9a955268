#ifndef SPVB_ELBO_HPP
#define SPVB_ELBO_HPP

#include <cmath>

#include "spvb/conjugate.hpp"
#include "spvb/variational.hpp"

namespace spvb {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Evidence lower bound shared by all three families. Each fitter supplies
// the family-specific expectations:
//   s_data      = E || y - X beta - w ||^2
//   prior_quad  = sum_i E[(w_i - b w_N)^2] / F_i
//   entropy_half_logdet = 1/2 log det Cov_q of all jointly-Gaussian blocks
//   gauss_dim   = dimension covered by entropy_half_logdet (n + p)
// Constants from the flat beta prior and the point-mass decay are omitted.
inline double elbo_value(int n, double s_data, double prior_quad, double sum_log_F,
                         double entropy_half_logdet, int gauss_dim,
                         const InverseGammaPosterior& q_tau2, const InverseGammaPosterior& q_sigma2,
                         const PriorSpec& prior) {
    double e_log_tau2 = q_tau2.e_log();
    double e_log_sigma2 = q_sigma2.e_log();
    double v = 0.0;
    // likelihood
    v += -0.5 * n * kLog2Pi - 0.5 * n * e_log_tau2 - 0.5 * q_tau2.e_inv() * s_data;
    // NNGP prior on w
    v += -0.5 * n * kLog2Pi - 0.5 * n * e_log_sigma2 - 0.5 * sum_log_F - 0.5 * q_sigma2.e_inv() * prior_quad;
    // IG priors
    v += prior.a_tau * std::log(prior.b_tau) - std::lgamma(prior.a_tau) - (prior.a_tau + 1.0) * e_log_tau2 -
         prior.b_tau * q_tau2.e_inv();
    v += prior.a_sigma * std::log(prior.b_sigma) - std::lgamma(prior.a_sigma) - (prior.a_sigma + 1.0) * e_log_sigma2 -
         prior.b_sigma * q_sigma2.e_inv();
    // uniform decay prior
    v += -std::log(prior.phi_max - prior.phi_min);
    // Gaussian entropy
    v += 0.5 * gauss_dim * (kLog2Pi + 1.0) + entropy_half_logdet;
    // IG entropies
    v += q_tau2.entropy() + q_sigma2.entropy();
    return v;
}

// Second-moment suppliers for the decay objective. Neighbor positions refer
// to the prior graph's processing order.

// NNGP family: E[(w_i - b w_N)^2] = (eta residual)^2 + MC mean of u residual^2.
inline SecondMomentFn nngp_second_moments(const VectorXd& eta, const McBatch& batch) {
    return [&eta, &batch](int i, std::span<const int> nbrs, std::span<const double> b) {
        double me = eta(i);
        for (std::size_t s = 0; s < nbrs.size(); ++s) me -= b[s] * eta(nbrs[s]);
        double total = me * me;
        int n_mc = batch.n_samples();
        double mc = 0.0;
        for (int j = 0; j < n_mc; ++j) {
            double r = batch.u(i, j);
            for (std::size_t s = 0; s < nbrs.size(); ++s) r -= b[s] * batch.u(nbrs[s], j);
            mc += r * r;
        }
        return total + mc / n_mc;
    };
}

// Joint family: the u rows are the w block of the stacked sample.
inline SecondMomentFn joint_second_moments(const VectorXd& eta, const JointMcBatch& batch) {
    return nngp_second_moments(eta, batch.w);
}

// Mean-field: exact closed form with diagonal covariance.
inline SecondMomentFn mfa_second_moments(const VectorXd& mu_w, const VectorXd& J) {
    return [&mu_w, &J](int i, std::span<const int> nbrs, std::span<const double> b) {
        double me = mu_w(i);
        double var = std::exp(J(i));
        for (std::size_t s = 0; s < nbrs.size(); ++s) {
            me -= b[s] * mu_w(nbrs[s]);
            var += b[s] * b[s] * std::exp(J(nbrs[s]));
        }
        return me * me + var;
    };
}

}  // namespace spvb

#endif
