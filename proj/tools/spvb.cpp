// Command-line front end: simulate, fit, predict, evaluate.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "spvb/evaluation.hpp"
#include "spvb/io.hpp"
#include "spvb/io_fit.hpp"
#include "spvb/linear_response.hpp"
#include "spvb/prediction.hpp"
#include "spvb/spvb.hpp"

namespace fs = std::filesystem;
using namespace spvb;

namespace {

double elapsed(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

std::string file_digest(const fs::path& p) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(read_text_file(p))));
    return buf;
}

void write_manifest(const fs::path& out_dir, const std::string& command, const RunSettings* rs,
                    std::uint64_t seed, const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::pair<std::string, double>>& timings) {
    JsonWriter w;
    w.begin_object();
    w.key("tool").value("spvb");
    w.key("version").value(kVersion);
    w.key("command").value(command);
    w.key("seed").value(seed);
    w.key("threads").value(get_threads());
    if (rs) w.key("config").value(config_echo(*rs));
    w.key("input_digests").begin_object();
    for (const auto& [name, digest] : inputs) w.key(name).value(digest);
    w.end_object();
    w.key("timings_seconds").begin_object();
    for (const auto& [name, secs] : timings) w.key(name).value(secs);
    w.end_object();
    w.end_object();
    write_text_file(out_dir / "manifest.json", w.str());
}

void write_fit_outputs(const fs::path& out, const FitReport& rep) {
    fs::create_directories(out);
    // posterior.json: regression, variance and decay posteriors.
    JsonWriter w;
    w.begin_object();
    w.key("method").value(method_name(rep.method));
    w.key("converged").value(rep.converged);
    w.key("epochs").value(rep.epochs);
    w.key("beta").begin_object();
    w.key("mean").value(rep.beta.mu);
    w.key("ci_lower").value(rep.beta.ci_lower());
    w.key("ci_upper").value(rep.beta.ci_upper());
    w.key("cov").value(rep.beta.V);
    w.end_object();
    auto ig = [&](const char* name, const InverseGammaPosterior& q) {
        w.key(name).begin_object();
        w.key("point_mass").value(q.is_point_mass());
        if (!q.is_point_mass()) w.key("shape").value(q.shape);
        w.key("scale").value(q.scale);
        w.key("mean").value(q.mean());
        w.end_object();
    };
    ig("tau2", rep.q_tau2);
    ig("sigma2", rep.q_sigma2);
    w.key("phi").value(rep.phi);
    w.end_object();
    write_text_file(out / "posterior.json", w.str());

    // Per-location posterior of w. orig_index maps back to the input file
    // rows (differs from the line number only after the mfa-lr filter).
    std::string csv = "orig_index,x,y,w_mean,w_var,w_lower,w_upper\n";
    for (int i = 0; i < rep.n(); ++i) {
        int orig = rep.lr_kept.empty() ? i : rep.lr_kept[static_cast<std::size_t>(i)];
        double sd = std::sqrt(std::max(rep.w_var(i), 0.0));
        csv += std::to_string(orig) + "," + format_double(rep.coords(i, 0)) + "," + format_double(rep.coords(i, 1)) +
               "," + format_double(rep.w_mean(i)) + "," + format_double(rep.w_var(i)) + "," +
               format_double(rep.w_mean(i) - 1.959963984540054 * sd) + "," +
               format_double(rep.w_mean(i) + 1.959963984540054 * sd) + "\n";
    }
    write_text_file(out / "w_summary.csv", csv);

    std::string trace = "epoch,elbo\n";
    for (std::size_t e = 0; e < rep.elbo_trace.size(); ++e)
        trace += std::to_string(e + 1) + "," + format_double(rep.elbo_trace[e]) + "\n";
    write_text_file(out / "elbo_trace.csv", trace);

    save_fit(out, rep);
}

int cmd_simulate(const fs::path& out, const SimSpec& spec) {
    auto t0 = std::chrono::steady_clock::now();
    auto [data, w_true] = simulate(spec);
    auto t1 = std::chrono::steady_clock::now();
    fs::create_directories(out);
    write_dataset_csv(out / "dataset.csv", data);
    std::string wcsv = "index,w_true\n";
    for (int i = 0; i < data.n(); ++i) wcsv += std::to_string(i) + "," + format_double(w_true(i)) + "\n";
    write_text_file(out / "w_true.csv", wcsv);
    auto t2 = std::chrono::steady_clock::now();
    write_manifest(out, "simulate", nullptr, spec.seed, {},
                   {{"simulate", elapsed(t0, t1)}, {"write", elapsed(t1, t2)}});
    return 0;
}

int cmd_fit(const std::string& method_str, const fs::path& data_path, const fs::path& out,
            RunSettings rs, bool full_cov) {
    auto t0 = std::chrono::steady_clock::now();
    Method method = parse_method(method_str);
    CsvTable table = read_csv(data_path);
    SpatialDataset data = dataset_from_csv(table, rs.response_column);
    if (!rs.phi_bounds_set && data.n() >= 2) {
        auto [lo, hi] = default_phi_bounds(data.coords);
        rs.prior.phi_min = lo;
        rs.prior.phi_max = hi;
    }
    auto t1 = std::chrono::steady_clock::now();
    FitReport rep;
    switch (method) {
        case Method::Nngp: rep = fit_spvb_nngp(data, rs.prior, rs.config); break;
        case Method::NngpJoint: rep = fit_spvb_nngp_joint(data, rs.prior, rs.config); break;
        case Method::Mfa: rep = fit_spvb_mfa(data, rs.prior, rs.config); break;
        case Method::MfaLr: rep = fit_spvb_mfa_lr(data, rs.prior, rs.config, full_cov); break;
    }
    auto t2 = std::chrono::steady_clock::now();
    write_fit_outputs(out, rep);
    auto t3 = std::chrono::steady_clock::now();
    write_manifest(out, "fit " + method_str, &rs, rs.config.rng_seed, {{"data", file_digest(data_path)}},
                   {{"load", elapsed(t0, t1)}, {"fit", elapsed(t1, t2)}, {"write", elapsed(t2, t3)}});
    return 0;
}

int cmd_predict(const fs::path& fit_dir, const fs::path& locations_path, const fs::path& out,
                int n_samples, std::uint64_t seed, const std::string& response_column) {
    auto t0 = std::chrono::steady_clock::now();
    FitReport rep = load_fit(fit_dir);
    CsvTable table = read_csv(locations_path);
    // New-location files carry x, y and the covariates; a response column is
    // allowed and ignored so held-out rows of a dataset file work directly.
    MatrixXd new_coords, new_X;
    {
        int cx = table.column("x"), cy = table.column("y"), cr = table.column(response_column);
        if (cx < 0 || cy < 0) throw std::invalid_argument("locations csv: needs coordinate columns named x and y");
        std::vector<int> cov_cols;
        for (std::size_t c = 0; c < table.header.size(); ++c)
            if (static_cast<int>(c) != cx && static_cast<int>(c) != cy && static_cast<int>(c) != cr)
                cov_cols.push_back(static_cast<int>(c));
        int r = static_cast<int>(table.rows.size());
        new_coords.resize(r, 2);
        new_X.resize(r, static_cast<int>(cov_cols.size()));
        for (int i = 0; i < r; ++i) {
            new_coords(i, 0) = table.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cx)];
            new_coords(i, 1) = table.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cy)];
            for (std::size_t j = 0; j < cov_cols.size(); ++j)
                new_X(i, static_cast<int>(j)) = table.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cov_cols[j])];
        }
    }
    auto t1 = std::chrono::steady_clock::now();
    PredictionDraws draws = predict(rep, new_coords, new_X, n_samples, seed);
    auto t2 = std::chrono::steady_clock::now();

    fs::create_directories(out);
    std::string csv = "index,x,y,w_mean,w_var,w_lower,w_upper,y_mean,y_var,y_lower,y_upper\n";
    for (int j = 0; j < new_coords.rows(); ++j) {
        csv += std::to_string(j) + "," + format_double(new_coords(j, 0)) + "," + format_double(new_coords(j, 1));
        csv += "," + format_double(draws.w_summary.mean(j)) + "," + format_double(draws.w_summary.variance(j)) + "," +
               format_double(draws.w_summary.lower(j)) + "," + format_double(draws.w_summary.upper(j));
        csv += "," + format_double(draws.y_summary.mean(j)) + "," + format_double(draws.y_summary.variance(j)) + "," +
               format_double(draws.y_summary.lower(j)) + "," + format_double(draws.y_summary.upper(j)) + "\n";
    }
    write_text_file(out / "predictions.csv", csv);
    auto t3 = std::chrono::steady_clock::now();
    write_manifest(out, "predict", nullptr, seed,
                   {{"fit", file_digest(fit_dir / "varstate.json")}, {"locations", file_digest(locations_path)}},
                   {{"load", elapsed(t0, t1)}, {"predict", elapsed(t1, t2)}, {"write", elapsed(t2, t3)}});
    return 0;
}

int cmd_evaluate(const fs::path& fit_dir, const fs::path& truth_path, const fs::path& data_path,
                 const fs::path& out, VectorXd beta_true, double tau2_true, double sigma2_true,
                 double phi_true, int n_draws, std::uint64_t seed, bool plot_data,
                 const std::string& response_column) {
    auto t0 = std::chrono::steady_clock::now();
    if (!fs::exists(truth_path)) throw std::invalid_argument("missing truth file " + truth_path.string());
    FitReport rep = load_fit(fit_dir);
    CsvTable truth_table = read_csv(truth_path);
    int ct = truth_table.column("w_true");
    if (ct < 0) throw std::invalid_argument("truth csv: missing column w_true");
    VectorXd w_true_all(static_cast<int>(truth_table.rows.size()));
    for (int i = 0; i < w_true_all.size(); ++i) w_true_all(i) = truth_table.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(ct)];

    // Restrict truth to the rows the fit used (identity unless mfa-lr filtered).
    VectorXd w_true(rep.n());
    if (!rep.lr_kept.empty()) {
        for (int i = 0; i < rep.n(); ++i) w_true(i) = w_true_all(rep.lr_kept[static_cast<std::size_t>(i)]);
    } else {
        if (w_true_all.size() != rep.n()) throw std::invalid_argument("truth csv: row count differs from the fit");
        w_true = w_true_all;
    }

    // Reference posterior needs the data; KL is restricted to dense scale.
    std::optional<ReferencePosterior> ref;
    if (!data_path.empty() && rep.n() <= 5000) {
        CsvTable table = read_csv(data_path);
        SpatialDataset data = dataset_from_csv(table, response_column);
        if (!rep.lr_kept.empty()) {
            SpatialDataset sub;
            sub.coords.resize(rep.n(), 2);
            sub.X.resize(rep.n(), data.p());
            sub.y.resize(rep.n());
            for (int i = 0; i < rep.n(); ++i) {
                int k = rep.lr_kept[static_cast<std::size_t>(i)];
                sub.coords.row(i) = data.coords.row(k);
                sub.X.row(i) = data.X.row(k);
                sub.y(i) = data.y(k);
            }
            data = sub;
        }
        if (beta_true.size() != data.p()) throw std::invalid_argument("evaluate: --beta-true length differs from data covariates");
        ref = reference_posterior(data, rep.graph, beta_true, tau2_true, sigma2_true, phi_true);
    }

    auto t1 = std::chrono::steady_clock::now();
    MatrixXd draws = draw_w_posterior(rep, n_draws, seed);
    double crps_sum = 0.0, is_sum = 0.0, mse_sum = 0.0;
    std::vector<std::pair<double, double>> intervals(static_cast<std::size_t>(rep.n()));
    std::vector<double> truths(static_cast<std::size_t>(rep.n()));
    std::vector<double> col(static_cast<std::size_t>(n_draws));
    for (int i = 0; i < rep.n(); ++i) {
        for (int l = 0; l < n_draws; ++l) col[static_cast<std::size_t>(l)] = draws(l, i);
        crps_sum += crps_samples(col, w_true(i));
        double lo = quantile_type7(col, 0.025), hi = quantile_type7(col, 0.975);
        intervals[static_cast<std::size_t>(i)] = {lo, hi};
        truths[static_cast<std::size_t>(i)] = w_true(i);
        is_sum += interval_score_95(lo, hi, w_true(i));
        mse_sum += (rep.w_mean(i) - w_true(i)) * (rep.w_mean(i) - w_true(i));
    }
    double coverage = coverage_95(intervals, truths);
    double kl = std::numeric_limits<double>::quiet_NaN();
    if (ref) {
        GaussianSummary q = rep.w_summary();
        if (rep.method == Method::MfaLr && rep.lr_cov.size() == 0 && !data_path.empty()) {
            // Rebuild the dense corrected covariance for the KL convention.
            // (w_summary falls back to the diagonal otherwise.)
            LrInputs lr = fit_mfa_for_lr(
                [&] {
                    SpatialDataset d;
                    d.coords = rep.coords;
                    CsvTable table = read_csv(data_path);
                    SpatialDataset full = dataset_from_csv(table, response_column);
                    d.X.resize(rep.n(), full.p());
                    d.y.resize(rep.n());
                    for (int i = 0; i < rep.n(); ++i) {
                        int k = rep.lr_kept.empty() ? i : rep.lr_kept[static_cast<std::size_t>(i)];
                        d.X.row(i) = full.X.row(k);
                        d.y(i) = full.y(k);
                    }
                    return d;
                }(),
                rep.q_tau2.scale, rep.q_sigma2.scale, rep.phi, rep.config);
            LrCorrected corr = lr_correct(lr, build_hessian_alpha(lr), nullptr, true);
            int p = static_cast<int>(lr.mu_beta.size());
            q.kind = GaussianSummary::Kind::Dense;
            q.dense.resize(rep.n(), rep.n());
            const auto& ord = lr.graph.order;
            for (int i = 0; i < rep.n(); ++i)
                for (int jj = 0; jj < rep.n(); ++jj)
                    q.dense(ord[static_cast<std::size_t>(i)], ord[static_cast<std::size_t>(jj)]) = corr.full(p + i, p + jj);
        }
        kl = kl_gaussian(q, *ref);
    }
    auto t2 = std::chrono::steady_clock::now();

    fs::create_directories(out);
    std::string csv = "metric,value\n";
    csv += "kl," + format_double(kl) + "\n";
    csv += "kl_per_n," + format_double(kl / rep.n()) + "\n";
    csv += "crps," + format_double(crps_sum / rep.n()) + "\n";
    csv += "interval_score_95," + format_double(is_sum / rep.n()) + "\n";
    csv += "coverage_95," + format_double(coverage) + "\n";
    csv += "mse," + format_double(mse_sum / rep.n()) + "\n";
    write_text_file(out / "metrics.csv", csv);

    JsonWriter w;
    w.begin_object();
    w.key("method").value(method_name(rep.method));
    w.key("n").value(rep.n());
    w.key("kl").value(kl);
    w.key("kl_per_n").value(kl / rep.n());
    w.key("crps").value(crps_sum / rep.n());
    w.key("interval_score_95").value(is_sum / rep.n());
    w.key("coverage_95").value(coverage);
    w.key("mse").value(mse_sum / rep.n());
    w.end_object();
    write_text_file(out / "metrics.json", w.str());

    if (plot_data && ref) {
        std::string scatter = "index,w_mean_fit,w_mean_ref,w_var_fit,w_var_ref\n";
        for (int i = 0; i < rep.n(); ++i) {
            int orig = rep.lr_kept.empty() ? i : rep.lr_kept[static_cast<std::size_t>(i)];
            scatter += std::to_string(orig) + "," + format_double(rep.w_mean(i)) + "," + format_double(ref->mean(i)) +
                       "," + format_double(rep.w_var(i)) + "," + format_double(ref->cov(i, i)) + "\n";
        }
        write_text_file(out / "scatter.csv", scatter);
    }
    auto t3 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, std::string>> inputs{{"fit", file_digest(fit_dir / "varstate.json")},
                                                            {"truth", file_digest(truth_path)}};
    if (!data_path.empty()) inputs.emplace_back("data", file_digest(data_path));
    write_manifest(out, "evaluate", nullptr, seed, inputs,
                   {{"load", elapsed(t0, t1)}, {"metrics", elapsed(t1, t2)}, {"write", elapsed(t2, t3)}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spVarBayes: variational Bayes for spatial mixed models with NNGP priors"};
    app.require_subcommand(1);
    app.fallthrough();

    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: all cores, or SPVB_THREADS)");

    // --- simulate ---
    auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
    SimSpec spec;
    std::vector<double> beta_flags{2.0, 5.0};
    std::string sim_out = "sim_out";
    sim->add_option("--n", spec.n, "number of locations");
    sim->add_option("--domain-side", spec.domain_side, "side length of the square domain");
    sim->add_option("--beta", beta_flags, "true regression coefficients");
    sim->add_option("--tau2", spec.tau2_true, "true nugget variance");
    sim->add_option("--sigma2", spec.sigma2_true, "true spatial variance");
    sim->add_option("--phi", spec.phi_true, "true decay");
    sim->add_option("--m-gen", spec.m_gen, "neighbor count used to generate w");
    sim->add_option("--seed", spec.seed, "RNG seed");
    sim->add_option("--out", sim_out, "output directory");

    // --- fit ---
    auto* fit = app.add_subcommand("fit", "fit one of the spVarBayes methods");
    std::string method = "nngp", data_file, config_file, fit_out = "fit_out";
    bool full_cov = false;
    RunSettings rs;
    bool epochs_given = false;
    fit->add_option("--method", method, "nngp | nngp-joint | mfa | mfa-lr")->required();
    fit->add_option("--data", data_file, "dataset csv")->required();
    fit->add_option("--config", config_file, "key-value config file");
    fit->add_option("--out", fit_out, "output directory");
    fit->add_option("--seed", rs.config.rng_seed, "RNG seed");
    fit->add_option("--batch-size", rs.config.batch_size, "mini-batch size (0 = full batch)");
    fit->add_option("--m", rs.config.m, "prior neighbor count");
    fit->add_option("--mq", rs.config.m_q, "variational neighbor count");
    fit->add_option("--n-mc", rs.config.n_mc, "Monte Carlo samples per epoch");
    auto* epochs_opt = fit->add_option("--epochs", rs.config.max_epochs, "maximum epochs");
    auto* phimin_opt = fit->add_option("--phi-min", rs.prior.phi_min, "decay prior lower bound");
    auto* phimax_opt = fit->add_option("--phi-max", rs.prior.phi_max, "decay prior upper bound");
    fit->add_option("--response-column", rs.response_column, "response column name");
    fit->add_flag("--full-cov", full_cov, "mfa-lr: keep the full corrected covariance");

    // --- predict ---
    auto* pred = app.add_subcommand("predict", "posterior predictive draws at new locations");
    std::string pred_fit_dir, pred_locations, pred_out = "pred_out", pred_response = "response";
    int n_samples = 1000;
    std::uint64_t pred_seed = 12345;
    pred->add_option("--fit", pred_fit_dir, "fit output directory")->required();
    pred->add_option("--locations", pred_locations, "csv with new locations (x, y, covariates)")->required();
    pred->add_option("--out", pred_out, "output directory");
    pred->add_option("--n-samples", n_samples, "number of composition draws");
    pred->add_option("--seed", pred_seed, "RNG seed");
    pred->add_option("--response-column", pred_response, "response column to ignore if present");

    // --- evaluate ---
    auto* ev = app.add_subcommand("evaluate", "metrics against simulation truth");
    std::string ev_fit_dir, ev_truth, ev_data, ev_out = "eval_out", ev_response = "response";
    std::vector<double> ev_beta{2.0, 5.0};
    double ev_tau2 = 0.5, ev_sigma2 = 10.0, ev_phi = 1.0;
    int ev_draws = 500;
    std::uint64_t ev_seed = 999;
    bool plot_data = false;
    ev->add_option("--fit", ev_fit_dir, "fit output directory")->required();
    ev->add_option("--truth", ev_truth, "w_true.csv from simulate")->required();
    ev->add_option("--data", ev_data, "dataset csv (enables KL against the reference posterior)");
    ev->add_option("--beta-true", ev_beta, "true coefficients");
    ev->add_option("--tau2-true", ev_tau2, "true nugget");
    ev->add_option("--sigma2-true", ev_sigma2, "true spatial variance");
    ev->add_option("--phi-true", ev_phi, "true decay");
    ev->add_option("--n-draws", ev_draws, "posterior draws per location for CRPS");
    ev->add_option("--seed", ev_seed, "RNG seed");
    ev->add_option("--out", ev_out, "output directory");
    ev->add_flag("--plot-data", plot_data, "write scatter.csv of fit vs reference moments");
    ev->add_option("--response-column", ev_response, "response column name");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) set_threads(threads);

    try {
        if (sim->parsed()) {
            spec.beta_true = Eigen::Map<VectorXd>(beta_flags.data(), static_cast<int>(beta_flags.size()));
            return cmd_simulate(sim_out, spec);
        }
        if (fit->parsed()) {
            RunSettings base;
            if (!config_file.empty()) read_config_file(config_file, base);
            // flags override the file
            RunSettings merged = base;
            if (fit->count("--seed")) merged.config.rng_seed = rs.config.rng_seed;
            if (fit->count("--batch-size")) merged.config.batch_size = rs.config.batch_size;
            if (fit->count("--m")) merged.config.m = rs.config.m;
            if (fit->count("--mq")) merged.config.m_q = rs.config.m_q;
            if (fit->count("--n-mc")) merged.config.n_mc = rs.config.n_mc;
            if (epochs_opt->count()) {
                merged.config.max_epochs = rs.config.max_epochs;
                epochs_given = true;
            }
            if (phimin_opt->count()) {
                merged.prior.phi_min = rs.prior.phi_min;
                merged.phi_bounds_set = true;
            }
            if (phimax_opt->count()) {
                merged.prior.phi_max = rs.prior.phi_max;
                merged.phi_bounds_set = true;
            }
            if (fit->count("--response-column")) merged.response_column = rs.response_column;
            if (!epochs_given && base.config.max_epochs == FitConfig{}.max_epochs &&
                (method == "mfa" || method == "mfa-lr"))
                merged.config.max_epochs = default_max_epochs_mfa();
            return cmd_fit(method, data_file, fit_out, merged, full_cov);
        }
        if (pred->parsed()) return cmd_predict(pred_fit_dir, pred_locations, pred_out, n_samples, pred_seed, pred_response);
        if (ev->parsed()) {
            VectorXd bt = Eigen::Map<VectorXd>(ev_beta.data(), static_cast<int>(ev_beta.size()));
            return cmd_evaluate(ev_fit_dir, ev_truth, ev_data, ev_out, bt, ev_tau2, ev_sigma2, ev_phi,
                                ev_draws, ev_seed, plot_data, ev_response);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
