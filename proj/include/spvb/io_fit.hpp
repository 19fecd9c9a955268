#ifndef SPVB_IO_FIT_HPP
#define SPVB_IO_FIT_HPP

#include <filesystem>
#include <json.hpp>
#include <string>

#include "spvb/io.hpp"
#include "spvb/report.hpp"

namespace spvb {

// Serialized variational state: everything predict/evaluate need to rebuild
// the fitted model. The neighbor graph is rebuilt from the coordinates, which
// is deterministic.
inline std::string fit_to_json(const FitReport& rep) {
    JsonWriter w;
    w.begin_object();
    w.key("version").value(kVersion);
    w.key("method").value(method_name(rep.method));
    w.key("converged").value(rep.converged);
    w.key("epochs").value(rep.epochs);
    w.key("phi").value(rep.phi);
    w.key("m").value(rep.config.m);
    w.key("m_q").value(rep.config.m_q);

    w.key("prior").begin_object();
    w.key("a_tau").value(rep.prior.a_tau);
    w.key("b_tau").value(rep.prior.b_tau);
    w.key("a_sigma").value(rep.prior.a_sigma);
    w.key("b_sigma").value(rep.prior.b_sigma);
    w.key("phi_min").value(rep.prior.phi_min);
    w.key("phi_max").value(rep.prior.phi_max);
    w.end_object();

    w.key("q_tau2").begin_object();
    w.key("point_mass").value(rep.q_tau2.is_point_mass());
    w.key("shape").value(rep.q_tau2.is_point_mass() ? 0.0 : rep.q_tau2.shape);
    w.key("scale").value(rep.q_tau2.scale);
    w.end_object();
    w.key("q_sigma2").begin_object();
    w.key("point_mass").value(rep.q_sigma2.is_point_mass());
    w.key("shape").value(rep.q_sigma2.is_point_mass() ? 0.0 : rep.q_sigma2.shape);
    w.key("scale").value(rep.q_sigma2.scale);
    w.end_object();

    w.key("beta_mu").value(rep.beta.mu);
    w.key("beta_cov").value(rep.beta.V);
    w.key("coords").value(rep.coords);
    w.key("w_mean").value(rep.w_mean);
    w.key("w_var").value(rep.w_var);
    if (!rep.lr_kept.empty()) w.key("lr_kept").value(rep.lr_kept);

    if (rep.nngp) {
        w.key("nngp").begin_object();
        w.key("eta").value(rep.nngp->eta);
        w.key("gamma").value(rep.nngp->gamma);
        w.key("a").begin_array();
        for (double v : rep.nngp->a) w.value(v);
        w.end_array();
        w.end_object();
    }
    if (rep.joint) {
        w.key("joint").begin_object();
        w.key("mu_beta").value(rep.joint->mu_beta);
        w.key("gamma_beta").value(rep.joint->gamma_beta);
        w.key("l_beta").value(rep.joint->l_beta);
        w.key("a_beta").value(rep.joint->a_beta);
        w.key("eta").value(rep.joint->w.eta);
        w.key("gamma").value(rep.joint->w.gamma);
        w.key("a").begin_array();
        for (double v : rep.joint->w.a) w.value(v);
        w.end_array();
        w.end_object();
    }
    if (rep.mfa) {
        w.key("mfa").begin_object();
        w.key("mu_w").value(rep.mfa->mu_w);
        w.key("J").value(rep.mfa->J);
        w.end_object();
    }
    w.end_object();
    return w.str();
}

namespace detail {

inline VectorXd json_vector(const nlohmann::json& j) {
    VectorXd v(static_cast<int>(j.size()));
    for (int i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
    return v;
}

inline MatrixXd json_matrix(const nlohmann::json& j) {
    int rows = static_cast<int>(j.size());
    int cols = rows > 0 ? static_cast<int>(j[0].size()) : 0;
    MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < cols; ++c) m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
    return m;
}

}  // namespace detail

inline FitReport fit_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    FitReport rep;
    rep.method = parse_method(j.at("method").get<std::string>());
    rep.converged = j.at("converged").get<bool>();
    rep.epochs = j.at("epochs").get<int>();
    rep.phi = j.at("phi").get<double>();
    rep.config.m = j.at("m").get<int>();
    rep.config.m_q = j.at("m_q").get<int>();

    const auto& pr = j.at("prior");
    rep.prior.a_tau = pr.at("a_tau").get<double>();
    rep.prior.b_tau = pr.at("b_tau").get<double>();
    rep.prior.a_sigma = pr.at("a_sigma").get<double>();
    rep.prior.b_sigma = pr.at("b_sigma").get<double>();
    rep.prior.phi_min = pr.at("phi_min").get<double>();
    rep.prior.phi_max = pr.at("phi_max").get<double>();

    auto read_ig = [&](const char* key) {
        InverseGammaPosterior ig;
        const auto& q = j.at(key);
        ig.scale = q.at("scale").get<double>();
        ig.shape = q.at("point_mass").get<bool>() ? std::numeric_limits<double>::infinity() : q.at("shape").get<double>();
        return ig;
    };
    rep.q_tau2 = read_ig("q_tau2");
    rep.q_sigma2 = read_ig("q_sigma2");

    rep.beta.mu = detail::json_vector(j.at("beta_mu"));
    rep.beta.V = detail::json_matrix(j.at("beta_cov"));
    rep.coords = detail::json_matrix(j.at("coords"));
    rep.w_mean = detail::json_vector(j.at("w_mean"));
    rep.w_var = detail::json_vector(j.at("w_var"));
    if (j.contains("lr_kept")) rep.lr_kept = j.at("lr_kept").get<std::vector<int>>();

    int n = static_cast<int>(rep.w_mean.size());
    rep.graph = build_neighbor_graph(rep.coords, std::min(rep.config.m, std::max(n - 1, 1)));
    rep.factors = nngp_factors(rep.coords, rep.graph, rep.phi);

    if (j.contains("nngp")) {
        auto v = std::make_shared<NngpVariational>();
        v->graph_q = truncate_graph(rep.graph, std::min(rep.config.m_q, rep.graph.m));
        v->eta = detail::json_vector(j.at("nngp").at("eta"));
        v->gamma = detail::json_vector(j.at("nngp").at("gamma"));
        v->a = j.at("nngp").at("a").get<std::vector<double>>();
        rep.nngp = v;
    }
    if (j.contains("joint")) {
        auto v = std::make_shared<JointVariational>();
        const auto& jj = j.at("joint");
        v->mu_beta = detail::json_vector(jj.at("mu_beta"));
        v->gamma_beta = detail::json_vector(jj.at("gamma_beta"));
        v->l_beta = detail::json_matrix(jj.at("l_beta"));
        v->a_beta = detail::json_matrix(jj.at("a_beta"));
        v->w.graph_q = truncate_graph(rep.graph, std::min(rep.config.m_q, rep.graph.m));
        v->w.eta = detail::json_vector(jj.at("eta"));
        v->w.gamma = detail::json_vector(jj.at("gamma"));
        v->w.a = jj.at("a").get<std::vector<double>>();
        rep.joint = v;
    }
    if (j.contains("mfa")) {
        auto v = std::make_shared<MfaVariational>();
        v->mu_w = detail::json_vector(j.at("mfa").at("mu_w"));
        v->J = detail::json_vector(j.at("mfa").at("J"));
        rep.mfa = v;
    }
    return rep;
}

inline void save_fit(const std::filesystem::path& dir, const FitReport& rep) {
    write_text_file(dir / "varstate.json", fit_to_json(rep));
}

inline FitReport load_fit(const std::filesystem::path& dir) {
    return fit_from_json(read_text_file(dir / "varstate.json"));
}

}  // namespace spvb

#endif
