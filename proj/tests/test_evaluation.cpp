#include <catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace spvb;
using namespace spvb_test;
using Catch::Approx;

TEST_CASE("simulate degenerate and statistical cases") {
    SimSpec clean;
    clean.n = 40;
    clean.tau2_true = 0.0;
    clean.sigma2_true = 0.0;
    clean.seed = 7;
    auto [d0, w0] = simulate(clean);
    CHECK(w0.cwiseAbs().maxCoeff() == 0.0);
    CHECK((d0.y - d0.X * clean.beta_true).cwiseAbs().maxCoeff() == 0.0);

    // marginal variance of the field is close to the sill; one realization of
    // a strongly correlated field is noisy, so average across replicates
    double avg_var = 0.0;
    int reps = 30;
    for (int r = 0; r < reps; ++r) {
        SimSpec s;
        s.n = 2000;
        s.seed = 100 + static_cast<std::uint64_t>(r);
        auto [dd, ww] = simulate(s);
        double mean = ww.mean();
        avg_var += (ww.array() - mean).square().sum() / (ww.size() - 1.0);
    }
    avg_var /= reps;
    CHECK(avg_var == Approx(10.0).epsilon(0.15));

    SimSpec spec;
    spec.n = 500;
    spec.seed = 8;
    auto [d, w] = simulate(spec);
    auto [d2, w2] = simulate(spec);
    CHECK((d.y - d2.y).cwiseAbs().maxCoeff() == 0.0);
    CHECK((w - w2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("reference posterior limits and two-route identity") {
    SimSpec spec;
    spec.n = 60;
    spec.seed = 9;
    auto [data, w_true] = simulate(spec);
    NeighborGraph g = build_neighbor_graph(data.coords, 15);
    NngpFactors f = nngp_factors(data.coords, g, spec.phi_true);

    // no-data limit
    ReferencePosterior flat = reference_posterior(data, g, spec.beta_true, 1e12, spec.sigma2_true, spec.phi_true);
    CHECK(flat.mean.cwiseAbs().maxCoeff() < 1e-6);
    MatrixXd ctilde_ord = spec.sigma2_true * dense_nngp_covariance(g, f);
    MatrixXd ctilde(60, 60);
    for (int i = 0; i < 60; ++i)
        for (int j = 0; j < 60; ++j)
            ctilde(g.order[static_cast<std::size_t>(i)], g.order[static_cast<std::size_t>(j)]) = ctilde_ord(i, j);
    CHECK((flat.cov - ctilde).cwiseAbs().maxCoeff() < 1e-5);

    // interpolation limit
    ReferencePosterior interp = reference_posterior(data, g, spec.beta_true, 1e-10, spec.sigma2_true, spec.phi_true);
    CHECK((interp.mean - (data.y - data.X * spec.beta_true)).cwiseAbs().maxCoeff() < 1e-6);

    // covariance-form route
    ReferencePosterior ref = reference_posterior(data, g, spec.beta_true, spec.tau2_true, spec.sigma2_true, spec.phi_true);
    MatrixXd route2_cov = ctilde - ctilde * (ctilde + spec.tau2_true * MatrixXd::Identity(60, 60)).ldlt().solve(ctilde);
    VectorXd resid = data.y - data.X * spec.beta_true;
    VectorXd route2_mean = ctilde * (ctilde + spec.tau2_true * MatrixXd::Identity(60, 60)).ldlt().solve(resid);
    CHECK((ref.cov - route2_cov).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((ref.mean - route2_mean).cwiseAbs().maxCoeff() < 1e-8);

    // normal equations invariant
    MatrixXd prec = dense_nngp_precision(g, f) / spec.sigma2_true;
    MatrixXd prec_in(60, 60);
    for (int i = 0; i < 60; ++i)
        for (int j = 0; j < 60; ++j)
            prec_in(g.order[static_cast<std::size_t>(i)], g.order[static_cast<std::size_t>(j)]) = prec(i, j);
    MatrixXd A = prec_in + MatrixXd::Identity(60, 60) / spec.tau2_true;
    CHECK((A * ref.mean - resid / spec.tau2_true).cwiseAbs().maxCoeff() < 1e-8);

    CHECK_THROWS_AS(
        [&] {
            SpatialDataset big;
            big.coords = MatrixXd::Zero(5001, 2);
            big.X = MatrixXd::Ones(5001, 1);
            big.y = VectorXd::Zero(5001);
            NeighborGraph gg = build_neighbor_graph(MatrixXd::Random(5001, 2), 3);
            reference_posterior(big, gg, VectorXd::Ones(1), 1.0, 1.0, 1.0);
        }(),
        std::invalid_argument);
}

TEST_CASE("gaussian KL in all three representations") {
    Rng rng(101);
    // q = ref -> 0 (dense)
    int n = 20;
    MatrixXd base = MatrixXd::Random(n, n);
    MatrixXd cov = base * base.transpose() + static_cast<double>(n) * MatrixXd::Identity(n, n);
    ReferencePosterior ref;
    ref.mean = VectorXd::Random(n);
    ref.cov = cov;
    GaussianSummary q;
    q.kind = GaussianSummary::Kind::Dense;
    q.mean = ref.mean;
    q.dense = cov;
    CHECK(kl_gaussian(q, ref) == Approx(0.0).margin(1e-9));

    // 1-D shift
    ReferencePosterior r1;
    r1.mean = VectorXd::Zero(1);
    r1.cov = MatrixXd::Identity(1, 1);
    GaussianSummary q1;
    q1.kind = GaussianSummary::Kind::Diagonal;
    q1.mean = VectorXd::Ones(1);
    q1.diag = VectorXd::Ones(1);
    CHECK(kl_gaussian(q1, r1) == Approx(0.5).epsilon(1e-12));

    // sparse-factor representation vs the direct dense formula
    MatrixXd coords = random_coords(40, rng);
    NeighborGraph g = build_neighbor_graph(coords, 6);
    NngpVariational v = random_state(g, 3, rng, 0.3, 0.3);
    MatrixXd Sq = dense_sqrt_cov(v);
    MatrixXd vq_ord = Sq * Sq.transpose();
    MatrixXd vq(40, 40);
    VectorXd mean_in(40);
    for (int i = 0; i < 40; ++i) {
        mean_in(g.order[static_cast<std::size_t>(i)]) = v.eta(i);
        for (int j = 0; j < 40; ++j)
            vq(g.order[static_cast<std::size_t>(i)], g.order[static_cast<std::size_t>(j)]) = vq_ord(i, j);
    }
    MatrixXd rbase = MatrixXd::Random(40, 40);
    ReferencePosterior r40;
    r40.mean = VectorXd::Random(40);
    r40.cov = rbase * rbase.transpose() + 40.0 * MatrixXd::Identity(40, 40);

    GaussianSummary qs;
    qs.kind = GaussianSummary::Kind::SparseFactor;
    qs.mean = mean_in;
    qs.factor = std::make_shared<NngpVariational>(v);
    double kl_sparse = kl_gaussian(qs, r40);

    // direct dense formula
    Eigen::LLT<MatrixXd> llt(r40.cov);
    MatrixXd ref_inv = llt.solve(MatrixXd::Identity(40, 40));
    VectorXd dmean = r40.mean - mean_in;
    double direct = 0.5 * ((ref_inv * vq).trace() + dmean.dot(ref_inv * dmean) - 40.0 +
                           std::log(r40.cov.determinant()) - std::log(vq.determinant()));
    CHECK(kl_sparse == Approx(direct).margin(1e-8));
    CHECK(kl_sparse >= 0.0);

    // KL is zero only when the moments match
    GaussianSummary q_off = qs;
    q_off.mean = mean_in.array() + 0.5;
    CHECK(kl_gaussian(q_off, r40) > 0.1);
}

TEST_CASE("crps closed forms") {
    CHECK(crps_samples({1.0, 1.0, 1.0}, 1.0) == Approx(0.0).margin(1e-15));
    CHECK(crps_samples({0.0, 2.0}, 1.0) == Approx(0.5).epsilon(1e-13));
    // permutation invariance
    CHECK(crps_samples({3.0, -1.0, 0.5}, 0.2) == Approx(crps_samples({0.5, 3.0, -1.0}, 0.2)).epsilon(1e-13));
    CHECK_THROWS_AS(crps_samples({1.0}, 0.0), std::invalid_argument);

    // Gaussian oracle: crps = s * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi));
    // a single 1e4-draw estimate carries ~2% Monte Carlo noise, so compare
    // the average over independent draw sets
    Rng rng(102);
    double mu = 0.7, sd = 1.9, truth = -0.4;
    double z = (truth - mu) / sd;
    double Phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
    double phi_z = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
    double closed = sd * (z * (2.0 * Phi - 1.0) + 2.0 * phi_z - 1.0 / std::sqrt(M_PI));
    double avg = 0.0;
    int sets = 20;
    std::vector<double> draws(10000);
    for (int s = 0; s < sets; ++s) {
        for (auto& d : draws) d = mu + sd * rng.normal();
        avg += crps_samples(draws, truth);
    }
    CHECK(avg / sets == Approx(closed).epsilon(0.02));
}

TEST_CASE("interval score") {
    CHECK(interval_score_95(0.0, 1.0, 0.5) == Approx(1.0));
    CHECK(interval_score_95(0.0, 1.0, 1.1) == Approx(5.0).epsilon(1e-13));
    CHECK_THROWS_AS(interval_score_95(1.0, 0.0, 0.5), std::invalid_argument);

    // double coding over random triples
    Rng rng(103);
    for (int t = 0; t < 1000; ++t) {
        double a = rng.normal(), b = rng.normal();
        double lo = std::min(a, b), hi = std::max(a, b), x = rng.normal();
        double expect = (hi - lo);
        if (x < lo) expect += 40.0 * (lo - x);
        if (x > hi) expect += 40.0 * (x - hi);
        CHECK(interval_score_95(lo, hi, x) == Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("coverage") {
    std::vector<std::pair<double, double>> iv{{0, 1}, {0, 1}, {0, 1}};
    CHECK(coverage_95(iv, {0.5, 0.2, 0.9}) == 1.0);
    CHECK(coverage_95(iv, {2.0, -1.0, 5.0}) == 0.0);

    Rng rng(104);
    int n = 10000;
    std::vector<std::pair<double, double>> ivs(static_cast<std::size_t>(n));
    std::vector<double> truths(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        ivs[static_cast<std::size_t>(i)] = {-1.959963984540054, 1.959963984540054};
        truths[static_cast<std::size_t>(i)] = rng.normal();
    }
    CHECK(coverage_95(ivs, truths) == Approx(0.95).margin(0.01));
}
