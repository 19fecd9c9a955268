#ifndef SPVB_IO_HPP
#define SPVB_IO_HPP

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spvb/math_util.hpp"
#include "spvb/report.hpp"

namespace spvb {

inline constexpr const char* kVersion = "0.1.0";

// All numeric output goes through one formatter: %.17g round-trips doubles
// exactly, so repeated runs compare byte for byte.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Minimal JSON emitter (objects, arrays, numbers, strings, bools).

class JsonWriter {
public:
    JsonWriter& begin_object() { return punct("{"); }
    JsonWriter& end_object() { return close("}"); }
    JsonWriter& begin_array() { return punct("["); }
    JsonWriter& end_array() { return close("]"); }

    JsonWriter& key(const std::string& k) {
        comma();
        out_ += '"' + escape(k) + "\":";
        fresh_ = true;
        return *this;
    }
    JsonWriter& value(double v) { return raw(format_double(v)); }
    JsonWriter& value(int v) { return raw(std::to_string(v)); }
    JsonWriter& value(std::uint64_t v) { return raw(std::to_string(v)); }
    JsonWriter& value(bool v) { return raw(v ? "true" : "false"); }
    JsonWriter& value(const std::string& s) { return raw('"' + escape(s) + '"'); }
    JsonWriter& value(const char* s) { return value(std::string(s)); }
    JsonWriter& value(const VectorXd& v) {
        begin_array();
        for (int i = 0; i < v.size(); ++i) value(v(i));
        return end_array();
    }
    JsonWriter& value(const std::vector<int>& v) {
        begin_array();
        for (int x : v) value(x);
        return end_array();
    }
    JsonWriter& value(const MatrixXd& m) {
        begin_array();
        for (int i = 0; i < m.rows(); ++i) {
            begin_array();
            for (int j = 0; j < m.cols(); ++j) value(m(i, j));
            end_array();
        }
        return end_array();
    }

    const std::string& str() const { return out_; }

private:
    JsonWriter& punct(const char* s) {
        comma();
        out_ += s;
        fresh_ = true;
        return *this;
    }
    JsonWriter& close(const char* s) {
        out_ += s;
        fresh_ = false;
        return *this;
    }
    JsonWriter& raw(const std::string& s) {
        comma();
        out_ += s;
        fresh_ = false;
        return *this;
    }
    void comma() {
        if (!fresh_ && !out_.empty() && out_.back() != '{' && out_.back() != '[' && out_.back() != ':') out_ += ',';
        fresh_ = false;
    }
    static std::string escape(const std::string& s) {
        std::string r;
        for (char c : s) {
            if (c == '"' || c == '\\') r += '\\';
            r += c;
        }
        return r;
    }
    std::string out_;
    bool fresh_ = true;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << content;
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    CsvTable t;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            std::size_t pos = line.find(',', start);
            cells.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        if (lineno == 1) {
            t.header = cells;
            continue;
        }
        if (cells.size() != t.header.size())
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(t.header.size()) + " columns, found " + std::to_string(cells.size()));
        std::vector<double> row(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const std::string& cell = cells[c];
            char* end = nullptr;
            row[c] = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size())
                throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed numeric value '" +
                                         cell + "' in column " + t.header[c]);
        }
        t.rows.push_back(std::move(row));
    }
    if (t.header.empty()) throw std::runtime_error(path.string() + ": empty file");
    return t;
}

// Dataset CSV: coordinate columns x and y, one response column, every other
// column a covariate (in file order).
inline SpatialDataset dataset_from_csv(const CsvTable& t, const std::string& response_column,
                                       std::vector<std::string>* covariate_names = nullptr) {
    int cx = t.column("x"), cy = t.column("y"), cr = t.column(response_column);
    if (cx < 0 || cy < 0) throw std::invalid_argument("data csv: needs coordinate columns named x and y");
    if (cr < 0) throw std::invalid_argument("data csv: missing response column '" + response_column + "'");
    int n = static_cast<int>(t.rows.size());
    if (n < 1) throw std::invalid_argument("data csv: no data rows");
    std::vector<int> cov_cols;
    for (std::size_t c = 0; c < t.header.size(); ++c)
        if (static_cast<int>(c) != cx && static_cast<int>(c) != cy && static_cast<int>(c) != cr) cov_cols.push_back(static_cast<int>(c));
    if (cov_cols.empty()) throw std::invalid_argument("data csv: needs at least one covariate column");
    SpatialDataset d;
    d.coords.resize(n, 2);
    d.X.resize(n, static_cast<int>(cov_cols.size()));
    d.y.resize(n);
    for (int i = 0; i < n; ++i) {
        d.coords(i, 0) = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cx)];
        d.coords(i, 1) = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cy)];
        d.y(i) = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cr)];
        for (std::size_t j = 0; j < cov_cols.size(); ++j)
            d.X(i, static_cast<int>(j)) = t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(cov_cols[j])];
    }
    d.validate();
    if (covariate_names) {
        covariate_names->clear();
        for (int c : cov_cols) covariate_names->push_back(t.header[static_cast<std::size_t>(c)]);
    }
    return d;
}

inline void write_dataset_csv(const std::filesystem::path& path, const SpatialDataset& d,
                              const std::string& response_column = "response") {
    std::string out = "x,y";
    for (int j = 0; j < d.p(); ++j) out += ",x" + std::to_string(j + 1);
    out += "," + response_column + "\n";
    for (int i = 0; i < d.n(); ++i) {
        out += format_double(d.coords(i, 0)) + "," + format_double(d.coords(i, 1));
        for (int j = 0; j < d.p(); ++j) out += "," + format_double(d.X(i, j));
        out += "," + format_double(d.y(i)) + "\n";
    }
    write_text_file(path, out);
}

// ---------------------------------------------------------------------------
// Key-value config file mirroring FitConfig/PriorSpec field names.

struct RunSettings {
    FitConfig config;
    PriorSpec prior;
    std::string response_column = "response";
    bool phi_bounds_set = false;
};

inline void apply_config_line(RunSettings& rs, const std::string& key, const std::string& value) {
    auto d = [&]() { return std::stod(value); };
    auto i = [&]() { return std::stoi(value); };
    if (key == "m") rs.config.m = i();
    else if (key == "m_q") rs.config.m_q = i();
    else if (key == "n_mc") rs.config.n_mc = i();
    else if (key == "max_epochs") rs.config.max_epochs = i();
    else if (key == "batch_size") rs.config.batch_size = i();
    else if (key == "adadelta_rate") rs.config.adadelta_rate = d();
    else if (key == "adadelta_noise") rs.config.adadelta_noise = d();
    else if (key == "stop_window") rs.config.stop_window = i();
    else if (key == "stop_patience") rs.config.stop_patience = i();
    else if (key == "rng_seed") rs.config.rng_seed = std::stoull(value);
    else if (key == "phi_grad_step") rs.config.phi_grad_step = d();
    else if (key == "a_tau") rs.prior.a_tau = d();
    else if (key == "b_tau") rs.prior.b_tau = d();
    else if (key == "a_sigma") rs.prior.a_sigma = d();
    else if (key == "b_sigma") rs.prior.b_sigma = d();
    else if (key == "phi_min") { rs.prior.phi_min = d(); rs.phi_bounds_set = true; }
    else if (key == "phi_max") { rs.prior.phi_max = d(); rs.phi_bounds_set = true; }
    else if (key == "response_column") rs.response_column = value;
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline void read_config_file(const std::filesystem::path& path, RunSettings& rs) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        auto trim = [](std::string s) {
            std::size_t a = s.find_first_not_of(" \t\r");
            std::size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": empty key");
        apply_config_line(rs, key, value);
    }
}

inline std::string config_echo(const RunSettings& rs) {
    std::ostringstream s;
    s << "m = " << rs.config.m << "\n";
    s << "m_q = " << rs.config.m_q << "\n";
    s << "n_mc = " << rs.config.n_mc << "\n";
    s << "max_epochs = " << rs.config.max_epochs << "\n";
    s << "batch_size = " << rs.config.batch_size << "\n";
    s << "adadelta_rate = " << format_double(rs.config.adadelta_rate) << "\n";
    s << "adadelta_noise = " << format_double(rs.config.adadelta_noise) << "\n";
    s << "stop_window = " << rs.config.stop_window << "\n";
    s << "stop_patience = " << rs.config.stop_patience << "\n";
    s << "rng_seed = " << rs.config.rng_seed << "\n";
    s << "phi_grad_step = " << format_double(rs.config.phi_grad_step) << "\n";
    s << "a_tau = " << format_double(rs.prior.a_tau) << "\n";
    s << "b_tau = " << format_double(rs.prior.b_tau) << "\n";
    s << "a_sigma = " << format_double(rs.prior.a_sigma) << "\n";
    s << "b_sigma = " << format_double(rs.prior.b_sigma) << "\n";
    s << "phi_min = " << format_double(rs.prior.phi_min) << "\n";
    s << "phi_max = " << format_double(rs.prior.phi_max) << "\n";
    s << "response_column = " << rs.response_column << "\n";
    return s.str();
}

}  // namespace spvb

#endif
