#include <catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace spvb;
using namespace spvb_test;
using Catch::Approx;

namespace {
// Expected log posterior L(alpha; z) coded literally from the expansion, for
// finite-difference Hessian checks. alpha = (E[beta], E[w]); z = (E[beta^2],
// E[w^2]) held fixed.
double oracle_L(const LrInputs& lr, const VectorXd& e_beta, const VectorXd& e_w,
                const VectorXd& e_beta2, const VectorXd& e_w2) {
    int n = lr.graph.n(), p = static_cast<int>(e_beta.size());
    double val = 0.0;
    for (int i = 0; i < n; ++i) {
        double term = 0.0;
        for (int j = 0; j < p; ++j) term += lr.X_ord(i, j) * lr.X_ord(i, j) * e_beta2(j);
        for (int j = 0; j < p; ++j)
            for (int k = 0; k < p; ++k)
                if (j != k) term += lr.X_ord(i, j) * lr.X_ord(i, k) * e_beta(j) * e_beta(k);
        double xb = lr.X_ord.row(i).dot(e_beta);
        term += -2.0 * lr.y_ord(i) * xb + 2.0 * e_w(i) * xb;
        term += lr.y_ord(i) * lr.y_ord(i) - 2.0 * lr.y_ord(i) * e_w(i) + e_w2(i);
        val += -term / (2.0 * lr.tau2);
    }
    for (int i = 0; i < n; ++i) {
        auto nb = lr.graph.neighbors(i);
        auto bw = lr.factors.row(i);
        double term = e_w2(i);
        for (std::size_t s = 0; s < nb.size(); ++s) {
            term += -2.0 * bw[s] * e_w(i) * e_w(nb[s]);
            term += bw[s] * bw[s] * e_w2(nb[s]);
            for (std::size_t t = 0; t < nb.size(); ++t)
                if (s != t) term += bw[s] * bw[t] * e_w(nb[s]) * e_w(nb[t]);
        }
        val += -term / (2.0 * lr.sigma2 * lr.factors.F(i));
    }
    return val;
}
}  // namespace

TEST_CASE("close-point filter") {
    Rng rng(91);
    SpatialDataset far = random_dataset(50, 2, rng, 100.0);
    auto [kept_data, kept] = filter_close_points(far, 1.0);
    CHECK(kept_data.n() == 50);
    CHECK(kept.size() == 50);

    SpatialDataset dup = far;
    dup.coords.row(7) = dup.coords.row(3);  // coincident pair
    std::vector<int> dropped;
    auto [f2, k2] = filter_close_points(dup, 1.0, 0.99, &dropped);
    CHECK(f2.n() == 49);
    REQUIRE(dropped.size() == 1);
    CHECK(dropped[0] == 7);  // the later point of the pair goes

    // clustered points: the survivors respect the correlation floor
    SpatialDataset cluster = random_dataset(100, 2, rng, 0.05);
    auto [f3, k3] = filter_close_points(cluster, 1.0, 0.99);
    double max_corr = 0.0;
    for (int i = 0; i < f3.n(); ++i)
        for (int j = i + 1; j < f3.n(); ++j) {
            double dx = f3.coords(i, 0) - f3.coords(j, 0), dy = f3.coords(i, 1) - f3.coords(j, 1);
            max_corr = std::max(max_corr, std::exp(-1.0 * std::sqrt(dx * dx + dy * dy)));
        }
    CHECK(max_corr < 0.99);
}

TEST_CASE("fixed-variance mean-field optimum") {
    Rng rng(92);
    SpatialDataset d = random_dataset(100, 2, rng);
    double tau2 = 2.0, sigma2 = 5.0, phi = 1.0;
    FitConfig cfg;
    LrInputs lr = fit_mfa_for_lr(d, tau2, sigma2, phi, cfg);

    for (int j = 0; j < 2; ++j)
        CHECK(lr.sigma2_beta(j) == Approx(tau2 / lr.X_ord.col(j).squaredNorm()).epsilon(1e-14));

    // intercept-only design: sigma2_beta = tau2 / n
    SpatialDataset ones = d;
    ones.X = MatrixXd::Ones(100, 1);
    LrInputs lr1 = fit_mfa_for_lr(ones, 2.0, sigma2, phi, cfg);
    CHECK(lr1.sigma2_beta(0) == Approx(0.02).epsilon(1e-14));

    // stationarity of the mean blocks
    VectorXd target = (lr.X_ord.transpose() * lr.X_ord).ldlt().solve(lr.X_ord.transpose() * (lr.y_ord - lr.mu_w));
    CHECK((lr.mu_beta - target).cwiseAbs().maxCoeff() < 1e-10);
    // w-block gradient vanishes at the optimum
    ModelExpectations ex;
    ex.e_inv_tau2 = 1.0 / tau2;
    ex.e_inv_sigma2 = 1.0 / sigma2;
    ex.data_offset = lr.y_ord - lr.X_ord * lr.mu_beta;
    MfaVariational v;
    v.mu_w = lr.mu_w;
    v.J = lr.G.array().log();
    CHECK(grad_mu_w(v, ex, lr.graph, lr.factors).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(grad_J(v, ex, lr.graph, lr.factors).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("hessian structure and finite-difference agreement") {
    Rng rng(93);
    int n = 80, p = 2;
    SpatialDataset d = random_dataset(n, p, rng);
    FitConfig cfg;
    LrInputs lr = fit_mfa_for_lr(d, 1.5, 4.0, 1.1, cfg);
    Eigen::SparseMatrix<double> H = build_hessian_alpha(lr);
    MatrixXd Hd = MatrixXd(H);

    for (int i = 0; i < n + p; ++i) CHECK(Hd(i, i) == 0.0);
    CHECK((Hd - Hd.transpose()).cwiseAbs().maxCoeff() < 1e-12);

    // two-point formula
    MatrixXd pair(2, 2);
    pair << 0, 0, 0.4, 0;
    SpatialDataset d2;
    d2.coords = pair;
    d2.X = MatrixXd::Ones(2, 1);
    d2.y = VectorXd::Ones(2);
    LrInputs lr2 = fit_mfa_for_lr(d2, 1.0, 2.0, 1.0, cfg);
    Eigen::SparseMatrix<double> H2 = build_hessian_alpha(lr2);
    MatrixXd H2d = MatrixXd(H2);
    double b21 = lr2.factors.row(1)[0];
    CHECK(H2d(1, 2) == Approx((1.0 / 2.0) * b21 / lr2.factors.F(1)).epsilon(1e-12));

    // finite differences of the coded expected log posterior
    VectorXd e_beta = lr.mu_beta, e_w = lr.mu_w;
    VectorXd e_beta2 = (lr.mu_beta.array().square() + lr.sigma2_beta.array()).matrix();
    VectorXd e_w2 = (lr.mu_w.array().square() + lr.G.array()).matrix();
    auto L_of = [&](const VectorXd& alpha) {
        return oracle_L(lr, alpha.head(p), alpha.tail(n), e_beta2, e_w2);
    };
    VectorXd alpha0(p + n);
    alpha0.head(p) = e_beta;
    alpha0.tail(n) = e_w;
    // L is exactly quadratic in alpha, so a large step has zero truncation
    // error and keeps the cancellation noise far below the entries
    double h = 0.5;
    double scale = Hd.cwiseAbs().maxCoeff();
    for (int a = 0; a < p + n; a += 3) {
        for (int b = a; b < p + n; b += 5) {
            VectorXd pp = alpha0, pm = alpha0, mp = alpha0, mm = alpha0;
            pp(a) += h; pp(b) += h;
            pm(a) += h; pm(b) -= h;
            mp(a) -= h; mp(b) += h;
            mm(a) -= h; mm(b) -= h;
            double fd = (L_of(pp) - L_of(pm) - L_of(mp) + L_of(mm)) / (4.0 * h * h);
            CHECK(Hd(a, b) == Approx(fd).epsilon(1e-6).margin(1e-6 * scale));
        }
    }
}

TEST_CASE("lr_correct basics and dense agreement") {
    Rng rng(94);
    // H = 0 -> no correction
    {
        SpatialDataset d = random_dataset(10, 1, rng);
        FitConfig cfg;
        LrInputs lr = fit_mfa_for_lr(d, 1.0, 1.0, 1.0, cfg);
        Eigen::SparseMatrix<double> H0(11, 11);
        LrCorrected c = lr_correct(lr, H0, nullptr, true);
        CHECK((c.diag.head(1) - lr.sigma2_beta).cwiseAbs().maxCoeff() < 1e-14);
        CHECK((c.diag.tail(10) - lr.G).cwiseAbs().maxCoeff() < 1e-14);
    }
    // p = 0, n = 2 hand computation
    {
        LrInputs lr;
        MatrixXd pair(2, 2);
        pair << 0, 0, 0.5, 0;
        lr.graph = build_neighbor_graph(pair, 1);
        lr.factors = nngp_factors(pair, lr.graph, 1.0);
        lr.tau2 = 1.0;
        lr.sigma2 = 1.0;
        lr.phi = 1.0;
        lr.X_ord = MatrixXd::Zero(2, 0);
        lr.y_ord = VectorXd::Zero(2);
        lr.mu_beta = VectorXd::Zero(0);
        lr.sigma2_beta = VectorXd::Zero(0);
        lr.mu_w = VectorXd::Zero(2);
        lr.G.resize(2);
        lr.G << 0.4, 0.3;
        Eigen::SparseMatrix<double> H = build_hessian_alpha(lr);
        LrCorrected c = lr_correct(lr, H, nullptr, true);
        MatrixXd Hd = MatrixXd(H);
        MatrixXd V = lr.G.asDiagonal();
        MatrixXd expect = (MatrixXd::Identity(2, 2) - V * Hd).inverse() * V;
        CHECK((c.full - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    // n = 300, p = 2 sparse vs dense
    {
        SpatialDataset d = random_dataset(300, 2, rng);
        FitConfig cfg;
        LrInputs lr = fit_mfa_for_lr(d, 1.0, 6.0, 0.8, cfg);
        Eigen::SparseMatrix<double> H = build_hessian_alpha(lr);
        LrCorrected c = lr_correct(lr, H, nullptr, true);
        MatrixXd Hd = MatrixXd(H);
        VectorXd vdiag(302);
        vdiag.head(2) = lr.sigma2_beta;
        vdiag.tail(300) = lr.G;
        MatrixXd dense = (MatrixXd::Identity(302, 302) - MatrixXd(vdiag.asDiagonal()) * Hd).inverse() *
                         MatrixXd(vdiag.asDiagonal());
        CHECK((c.full - dense).cwiseAbs().maxCoeff() < 1e-8);
        // symmetry after solves
        CHECK((c.full - c.full.transpose()).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("block-inverse identity over the full sufficient statistics") {
    Rng rng(95);
    int n = 50, p = 2, N = p + n;
    SpatialDataset d = random_dataset(n, p, rng);
    FitConfig cfg;
    LrInputs lr = fit_mfa_for_lr(d, 1.2, 3.0, 1.0, cfg);
    Eigen::SparseMatrix<double> H_alpha = build_hessian_alpha(lr);

    // Full V over theta = (alpha, z) for Gaussian marginals:
    // Cov(x, x^2) = 2 mu s2, Var(x^2) = 2 s2^2 + 4 mu^2 s2.
    VectorXd mu(N), s2(N);
    mu.head(p) = lr.mu_beta;
    mu.tail(n) = lr.mu_w;
    s2.head(p) = lr.sigma2_beta;
    s2.tail(n) = lr.G;
    MatrixXd V = MatrixXd::Zero(2 * N, 2 * N);
    for (int i = 0; i < N; ++i) {
        V(i, i) = s2(i);
        V(i, N + i) = V(N + i, i) = 2.0 * mu(i) * s2(i);
        V(N + i, N + i) = 2.0 * s2(i) * s2(i) + 4.0 * mu(i) * mu(i) * s2(i);
    }
    MatrixXd Hfull = MatrixXd::Zero(2 * N, 2 * N);
    Hfull.topLeftCorner(N, N) = MatrixXd(H_alpha);

    MatrixXd big = (MatrixXd::Identity(2 * N, 2 * N) - V * Hfull).inverse() * V;
    MatrixXd Va = MatrixXd(s2.asDiagonal());
    MatrixXd small = (MatrixXd::Identity(N, N) - Va * MatrixXd(H_alpha)).inverse() * Va;
    CHECK((big.topLeftCorner(N, N) - small).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("corrected covariance recovers the exact conditional posterior") {
    // with (tau2, sigma2, phi) fixed at truth the corrected covariance is the
    // exact joint Gaussian posterior over (beta, w); its w block dominates the
    // conditional-at-fixed-beta reference up to the small beta-uncertainty term
    SimSpec spec;
    spec.n = 300;
    spec.seed = 51;
    auto [data, w_true] = simulate(spec);
    FitConfig cfg;
    LrInputs lr = fit_mfa_for_lr(data, spec.tau2_true, spec.sigma2_true, spec.phi_true, cfg);
    Eigen::SparseMatrix<double> H = build_hessian_alpha(lr);
    LrCorrected corr = lr_correct(lr, H, nullptr, true);

    ReferencePosterior ref = reference_posterior(data, lr.graph, spec.beta_true, spec.tau2_true,
                                                 spec.sigma2_true, spec.phi_true);
    std::vector<double> rel;
    for (int k = 0; k < 300; ++k) {
        int input_row = lr.graph.order[static_cast<std::size_t>(k)];
        double got = corr.diag(2 + k);
        double want = ref.cov(input_row, input_row);
        rel.push_back(std::abs(got - want) / want);
    }
    std::nth_element(rel.begin(), rel.begin() + 150, rel.end());
    CHECK(rel[150] < 0.05);
}
