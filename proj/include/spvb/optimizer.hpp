#ifndef SPVB_OPTIMIZER_HPP
#define SPVB_OPTIMIZER_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "spvb/rng.hpp"

namespace spvb {

// Per-parameter-group AdaDelta accumulators. Updates are ascent steps: the
// returned delta is added to the parameter.
struct AdaDeltaState {
    Eigen::ArrayXd Eg2;
    Eigen::ArrayXd Edx2;
    double rate;
    double noise;

    AdaDeltaState(int dim, double r, double d)
        : Eg2(Eigen::ArrayXd::Zero(dim)), Edx2(Eigen::ArrayXd::Zero(dim)), rate(r), noise(d) {}

    Eigen::ArrayXd step(const Eigen::ArrayXd& g) {
        if (g.size() != Eg2.size()) throw std::invalid_argument("adadelta: shape mismatch");
        Eg2 = rate * Eg2 + (1.0 - rate) * g.square();
        Eigen::ArrayXd delta = (Edx2 + noise).sqrt() / (Eg2 + noise).sqrt() * g;
        Edx2 = rate * Edx2 + (1.0 - rate) * delta.square();
        return delta;
    }

    double step_scalar(double g) {
        Eigen::ArrayXd ga(1);
        ga(0) = g;
        return step(ga)(0);
    }

    // Non-finite gradient guard: the epoch's step is skipped and the
    // accumulators halved so the next usable step is conservative.
    void halve() {
        Eg2 *= 0.5;
        Edx2 *= 0.5;
    }
};

inline std::pair<AdaDeltaState, Eigen::ArrayXd> adadelta_step(AdaDeltaState state, const Eigen::ArrayXd& g) {
    Eigen::ArrayXd delta = state.step(g);
    return {std::move(state), std::move(delta)};
}

// Trailing-average early stopping: track the best P-window mean of the ELBO
// stream and stop after more than K consecutive non-improvements.
struct StoppingState {
    int window_size;
    int patience;
    std::deque<double> window;
    double window_sum = 0.0;
    double best_avg = -std::numeric_limits<double>::infinity();
    int fail_count = 0;

    StoppingState(int P, int K) : window_size(P), patience(K) {
        if (P < 1 || K < 1) throw std::invalid_argument("stopping: P and K must be >= 1");
    }
};

inline bool should_stop(StoppingState& s, double new_elbo) {
    s.window.push_back(new_elbo);
    s.window_sum += new_elbo;
    if (static_cast<int>(s.window.size()) > s.window_size) {
        s.window_sum -= s.window.front();
        s.window.pop_front();
    }
    if (static_cast<int>(s.window.size()) < s.window_size) return false;
    double avg = s.window_sum / static_cast<double>(s.window_size);
    if (avg > s.best_avg) {
        s.best_avg = avg;
        s.fail_count = 0;
    } else {
        ++s.fail_count;
    }
    return s.fail_count > s.patience;
}

// Random partition of 0..n-1 into batches of batch_size (last may be short).
// batch_size = 0 means one full batch.
inline std::vector<std::vector<int>> make_batches(int n, int batch_size, Rng& rng) {
    if (n < 1) throw std::invalid_argument("batches: n must be >= 1");
    if (batch_size < 0 || batch_size > n) throw std::invalid_argument("batches: batch_size out of range");
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    if (batch_size == 0 || batch_size == n) return {std::move(perm)};
    for (int i = n - 1; i > 0; --i) {
        int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    std::vector<std::vector<int>> out;
    for (int start = 0; start < n; start += batch_size) {
        int end = std::min(n, start + batch_size);
        out.emplace_back(perm.begin() + start, perm.begin() + end);
    }
    return out;
}

}  // namespace spvb

#endif
