#ifndef SPVB_REPORT_HPP
#define SPVB_REPORT_HPP

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "spvb/config.hpp"
#include "spvb/conjugate.hpp"
#include "spvb/variational.hpp"

namespace spvb {

enum class Method { Nngp, NngpJoint, Mfa, MfaLr };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::Nngp: return "nngp";
        case Method::NngpJoint: return "nngp-joint";
        case Method::Mfa: return "mfa";
        case Method::MfaLr: return "mfa-lr";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "nngp") return Method::Nngp;
    if (s == "nngp-joint") return Method::NngpJoint;
    if (s == "mfa") return Method::Mfa;
    if (s == "mfa-lr") return Method::MfaLr;
    throw std::invalid_argument("unknown method '" + s + "' (expected nngp, nngp-joint, mfa, mfa-lr)");
}

// Posterior summary of a Gaussian with one of three covariance encodings.
// Means and diagonals are in input order; the sparse factor carries its own
// processing order.
struct GaussianSummary {
    enum class Kind { Diagonal, SparseFactor, Dense };
    Kind kind = Kind::Diagonal;
    VectorXd mean;
    VectorXd diag;
    std::shared_ptr<const NngpVariational> factor;
    MatrixXd dense;
};

struct FitTimings {
    double init_seconds = 0.0;
    double optimize_seconds = 0.0;
    double total_seconds = 0.0;
};

struct FitReport {
    Method method = Method::Nngp;
    bool converged = false;
    int epochs = 0;
    std::vector<double> elbo_trace;

    BetaPosterior beta;
    InverseGammaPosterior q_tau2, q_sigma2;
    double phi = 0.0;

    // Geometry kept for prediction and evaluation.
    MatrixXd coords;          // input order
    NeighborGraph graph;      // prior graph (m neighbors)
    NngpFactors factors;      // at the final decay

    // Posterior of w in input order.
    VectorXd w_mean, w_var;

    // Method-specific variational state (processing order).
    std::shared_ptr<NngpVariational> nngp;
    std::shared_ptr<JointVariational> joint;
    std::shared_ptr<MfaVariational> mfa;

    // For mfa-lr: the fit runs on the filtered dataset; lr_kept maps its rows
    // back to rows of the original input. Corrected w variances live in
    // w_var; lr_cov holds the full corrected w block when it was requested.
    std::vector<int> lr_kept;
    MatrixXd lr_cov;

    PriorSpec prior;
    FitConfig config;
    FitTimings timings;

    int n() const { return static_cast<int>(w_mean.size()); }

    // q(w) summary for evaluation in the representation natural to the method.
    GaussianSummary w_summary() const {
        GaussianSummary g;
        g.mean = w_mean;
        switch (method) {
            case Method::Nngp:
                g.kind = GaussianSummary::Kind::SparseFactor;
                g.factor = nngp;
                break;
            case Method::NngpJoint: {
                g.kind = GaussianSummary::Kind::Dense;
                MatrixXd S = dense_sqrt_cov_joint(*joint);
                int nn = joint->w.n();
                MatrixXd Sw = S.bottomRows(nn);
                MatrixXd cov_ordered = Sw * Sw.transpose();
                g.dense.resize(nn, nn);
                const auto& ord = joint->w.graph_q.order;
                for (int i = 0; i < nn; ++i)
                    for (int j = 0; j < nn; ++j) g.dense(ord[static_cast<std::size_t>(i)], ord[static_cast<std::size_t>(j)]) = cov_ordered(i, j);
                break;
            }
            case Method::Mfa:
                g.kind = GaussianSummary::Kind::Diagonal;
                g.diag = w_var;
                break;
            case Method::MfaLr:
                if (lr_cov.size() > 0) {
                    g.kind = GaussianSummary::Kind::Dense;
                    g.dense = lr_cov;
                } else {
                    g.kind = GaussianSummary::Kind::Diagonal;
                    g.diag = w_var;
                }
                break;
        }
        return g;
    }
};

}  // namespace spvb

#endif
