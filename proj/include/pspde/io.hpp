#pragma once

// Run configuration files, spectrum CSV import/export, trajectory stores and
// the metrics table. Floats are serialized with 17 significant digits so
// files round-trip bit-exactly; step files are written to a temporary name
// and renamed into place.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pspde/baselines.hpp"
#include "pspde/errors.hpp"
#include "pspde/filter.hpp"

namespace pspde {

inline constexpr const char* kCodeVersion = "0.1.0";

namespace io {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << content;
    }
    std::filesystem::rename(tmp, path);
}

inline std::uint64_t content_hash(const std::string& text) {
    return detail::fnv1a(text);
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// Flat dotted-key configuration text.
// ---------------------------------------------------------------------------

class ConfigMap {
  public:
    static ConfigMap parse(const std::string& text) {
        ConfigMap out;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                const auto b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
            if (out.values_.count(key))
                throw ConfigError("duplicate key '" + key + "'");
            out.values_[key] = value;
        }
        return out;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        consumed_.insert(key);
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': not a number: '" + it->second + "'");
        }
    }

    long long get_int(const std::string& key, long long fallback) {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': not an integer: '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        consumed_.insert(key);
        const auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw ConfigError("key '" + key + "': expected true or false");
    }

    void reject_unknown() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key)) throw ConfigError("unknown key '" + key + "'");
    }

  private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace io

enum class SolverKind { Probabilistic, Reference, Trapezoidal };

/// Everything a `run` invocation needs, parsed from the flat config text.
struct RunSetup {
    RunConfig run;
    SolverKind solver = SolverKind::Probabilistic;
    int reference_resolution = 1024;
    double reference_dt = 0.0;  // 0: delta / 100
    bool reference_self_check = true;
    std::string config_text;
};

inline RunSetup parse_run_setup(const std::string& text,
                                const std::filesystem::path& base_dir = {}) {
    io::ConfigMap cfg = io::ConfigMap::parse(text);
    RunSetup out;
    out.config_text = text;
    RunConfig& rc = out.run;

    rc.K = static_cast<int>(cfg.get_int("grid.K", 128));
    if (rc.K < 4 || rc.K % 2 != 0) throw ConfigError("grid.K: must be even and >= 4");

    rc.steps = static_cast<int>(cfg.get_int("run.steps", 25));
    rc.delta = cfg.get_double("run.delta", 0.04);
    rc.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed", 0));
    const std::string policy = cfg.get_string("run.policy", "abort");
    if (policy == "abort")
        rc.policy = FailPolicy::Abort;
    else if (policy == "continue")
        rc.policy = FailPolicy::Continue;
    else
        throw ConfigError("run.policy: expected abort or continue");

    const std::string kind = cfg.get_string("solver.kind", "probabilistic");
    if (kind == "probabilistic")
        out.solver = SolverKind::Probabilistic;
    else if (kind == "reference")
        out.solver = SolverKind::Reference;
    else if (kind == "trapezoidal")
        out.solver = SolverKind::Trapezoidal;
    else
        throw ConfigError("solver.kind: expected probabilistic, reference or trapezoidal");
    out.reference_resolution = static_cast<int>(cfg.get_int("reference.K_ref", 1024));
    out.reference_dt = cfg.get_double("reference.dt", 0.0);
    out.reference_self_check = cfg.get_bool("reference.self_check", true);
    if (out.solver == SolverKind::Reference) {
        if (out.reference_resolution < 4 * rc.K)
            throw ConfigError("reference.K_ref: must be at least 4 * grid.K");
        const double dt = out.reference_dt > 0.0 ? out.reference_dt : rc.delta / 100.0;
        if (dt > rc.delta / 50.0)
            throw ConfigError("reference.dt: must be at most run.delta / 50");
    }

    rc.pde_name = cfg.get_string("pde.name", "diffusion");
    rc.nu = cfg.get_double("pde.nu", 0.01);

    const std::string mode = cfg.get_string("spectrum.mode", "power_law");
    if (mode == "power_law")
        rc.spectrum_mode = SpectrumMode::FixedPowerLaw;
    else if (mode == "file")
        rc.spectrum_mode = SpectrumMode::FixedFromFile;
    else if (mode == "adaptive")
        rc.spectrum_mode = SpectrumMode::Adaptive;
    else
        throw ConfigError("spectrum.mode: expected power_law, file or adaptive");

    rc.power_law_exponent = cfg.get_double("spectrum.exponent", -6.0);
    rc.power_law_amplitude = cfg.get_double("spectrum.amplitude", 1.0);
    rc.spectrum_file = cfg.get_string("spectrum.file", "");
    if (!rc.spectrum_file.empty() && !base_dir.empty() &&
        std::filesystem::path(rc.spectrum_file).is_relative())
        rc.spectrum_file = (base_dir / rc.spectrum_file).string();
    rc.tau_nodes = static_cast<int>(cfg.get_int("spectrum.nodes", 500));
    rc.hyper.n_max = static_cast<int>(cfg.get_int("spectrum.n_max", 100));
    rc.hyper.sigma_tau = cfg.get_double("spectrum.sigma_tau", 1.0);
    rc.hyper.slope = cfg.get_double("spectrum.slope", -3.0);
    const std::string offset = cfg.get_string("spectrum.offset", "auto");
    if (offset == "auto") {
        rc.offset_auto = true;
    } else if (offset == "rms") {
        rc.offset_auto = false;
        rc.offset_rms = true;
    } else {
        rc.offset_auto = false;
        try {
            rc.hyper.offset = std::stod(offset);
        } catch (const std::exception&) {
            throw ConfigError("spectrum.offset: expected a number, auto, or rms");
        }
    }

    rc.step.gtol = cfg.get_double("optimizer.gtol", 1e-9);
    rc.step.max_iters = static_cast<int>(cfg.get_int("optimizer.max_iters", 500));
    rc.step.trunc_threshold = cfg.get_double("filter.truncation_threshold", 1e-12);
    const std::string v_mode = cfg.get_string("filter.v_mode", "sample");
    if (v_mode == "sample")
        rc.step.sample_v = true;
    else if (v_mode == "mean")
        rc.step.sample_v = false;
    else
        throw ConfigError("filter.v_mode: expected sample or mean");

    rc.profile.amplitude = cfg.get_double("init.amplitude", 1.0);
    rc.profile.width = cfg.get_double("init.width", 0.05);
    rc.profile.center = cfg.get_double("init.center", 0.5);

    cfg.reject_unknown();
    rc.step.hyper = rc.hyper;
    rc.validate();
    if (rc.spectrum_mode == SpectrumMode::FixedFromFile && rc.spectrum_file.empty())
        throw ConfigError("spectrum.file: required when spectrum.mode = file");
    return out;
}

// ---------------------------------------------------------------------------
// Spectrum CSV formats.
// ---------------------------------------------------------------------------

/// Single spectrum: a header comment with the grid metadata, then l,tau rows.
inline void save_spectrum_csv(const std::filesystem::path& path, const LogSpectrum& spec,
                              const SpectrumHyper& hyper) {
    std::ostringstream out;
    out << "# pspde-spectrum L=" << spec.size() << " l_max=" << io::format_double(spec.l_max)
        << " sigma0=" << io::format_double(spec.sigma0)
        << " sigma_tau=" << io::format_double(hyper.sigma_tau)
        << " offset=" << io::format_double(hyper.offset)
        << " slope=" << io::format_double(hyper.slope) << " n_max=" << hyper.n_max << "\n";
    out << "l,tau\n";
    for (int m = 0; m < spec.size(); ++m)
        out << io::format_double(spec.node(m)) << "," << io::format_double(spec.tau(m)) << "\n";
    io::write_file_atomic(path, out.str());
}

namespace io {

inline std::map<std::string, std::string> parse_header_fields(const std::string& line) {
    std::map<std::string, std::string> out;
    std::istringstream in(line);
    std::string token;
    while (in >> token) {
        const auto eq = token.find('=');
        if (eq != std::string::npos) out[token.substr(0, eq)] = token.substr(eq + 1);
    }
    return out;
}

}  // namespace io

inline LogSpectrum load_spectrum_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open spectrum file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("# pspde-spectrum", 0) != 0)
        throw IoError(path.string() + ": missing pspde-spectrum header");
    const auto fields = io::parse_header_fields(line);
    const double l_max = std::stod(fields.at("l_max"));
    const double sigma0 = std::stod(fields.at("sigma0"));
    const int L = std::stoi(fields.at("L"));

    std::getline(in, line);  // column header
    Eigen::VectorXd tau(L);
    for (int m = 0; m < L; ++m) {
        if (!std::getline(in, line)) throw IoError(path.string() + ": truncated spectrum rows");
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw IoError(path.string() + ": malformed row");
        tau(m) = std::stod(line.substr(comma + 1));
    }
    return LogSpectrum(tau, l_max, sigma0);
}

/// Per-step spectra: one tau row per step, shared grid metadata in the header.
inline void save_spectra_table(const std::filesystem::path& path,
                               const std::vector<LogSpectrum>& spectra) {
    if (spectra.empty()) {
        io::write_file_atomic(path, "# pspde-spectra L=0 l_max=0 sigma0=1\nstep\n");
        return;
    }
    std::ostringstream out;
    out << "# pspde-spectra L=" << spectra.front().size()
        << " l_max=" << io::format_double(spectra.front().l_max)
        << " sigma0=" << io::format_double(spectra.front().sigma0) << "\n";
    out << "step";
    for (int m = 0; m < spectra.front().size(); ++m) out << ",tau_" << m;
    out << "\n";
    for (std::size_t i = 0; i < spectra.size(); ++i) {
        out << i;
        for (int m = 0; m < spectra[i].size(); ++m)
            out << "," << io::format_double(spectra[i].tau(m));
        out << "\n";
    }
    io::write_file_atomic(path, out.str());
}

inline std::vector<LogSpectrum> load_spectra_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open spectra file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
    if (line.rfind("# pspde-spectra", 0) != 0) {
        // Fall back to the single-spectrum format.
        return {load_spectrum_csv(path)};
    }
    const auto fields = io::parse_header_fields(line);
    const int L = std::stoi(fields.at("L"));
    const double l_max = std::stod(fields.at("l_max"));
    const double sigma0 = std::stod(fields.at("sigma0"));

    std::vector<LogSpectrum> out;
    std::getline(in, line);  // column header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Eigen::VectorXd tau(L);
        std::size_t pos = line.find(',');
        for (int m = 0; m < L; ++m) {
            if (pos == std::string::npos) throw IoError(path.string() + ": truncated row");
            const std::size_t next = line.find(',', pos + 1);
            tau(m) = std::stod(line.substr(pos + 1, next - pos - 1));
            pos = next;
        }
        out.emplace_back(tau, l_max, sigma0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trajectory store.
// ---------------------------------------------------------------------------

struct MetricsRow {
    int step = 0;
    double time = 0.0;
    std::optional<double> rel_l2_vs_reference;
    double total_power = 0.0;
    int optimizer_iters = 0;
    double grad_norm = 0.0;
};

class TrajectoryStore {
  public:
    TrajectoryStore(std::filesystem::path dir, const std::string& kind,
                    const std::string& config_text, std::uint64_t seed)
        : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_ / "steps");
        io::write_file_atomic(dir_ / "config.cfg", config_text);

        nlohmann::json manifest;
        manifest["kind"] = kind;
        manifest["config_hash"] = io::hash_hex(io::content_hash(config_text));
        manifest["seed"] = seed;
        manifest["code_version"] = kCodeVersion;
        io::write_file_atomic(dir_ / "manifest.json", manifest.dump(2) + "\n");

        metrics_path_ = dir_ / "metrics.csv";
        io::write_file_atomic(metrics_path_,
                              "step,time,rel_l2_error_vs_reference,total_power,"
                              "optimizer_iters,grad_norm\n");
    }

    static std::filesystem::path step_base(const std::filesystem::path& dir, int step) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "step_%06d", step);
        return dir / "steps" / buf;
    }

    const std::filesystem::path& dir() const { return dir_; }

    void save_state(int step, const SimState& state, bool with_spectrum = true) const {
        const std::filesystem::path base = step_base(dir_, step);
        const int K = state.K, order = state.order;
        ModeSet modes(K);

        std::ostringstream u_csv;
        u_csv << "k";
        for (int c = 0; c <= order; ++c) u_csv << ",u" << c << "_re,u" << c << "_im";
        u_csv << "\n";
        for (int p = 0; p < K; ++p) {
            const int k = modes.mode_at(p);
            u_csv << k;
            const int kk = std::abs(k);
            for (int c = 0; c <= order; ++c) {
                Complex v = state.mode(kk).u(c);
                if (k < 0) v = std::conj(v);
                u_csv << "," << io::format_double(v.real()) << ","
                      << io::format_double(v.imag());
            }
            u_csv << "\n";
        }
        io::write_file_atomic(base.string() + "_u.csv", u_csv.str());

        std::ostringstream v_csv;
        v_csv << "k";
        for (int c = 1; c <= order; ++c) v_csv << ",v" << c << "_re,v" << c << "_im";
        v_csv << "\n";
        for (int p = 0; p < K; ++p) {
            const int k = modes.mode_at(p);
            v_csv << k;
            const int kk = std::abs(k);
            for (int c = 0; c < order; ++c) {
                Complex v = state.mode(kk).v(c);
                if (k < 0) v = std::conj(v);
                v_csv << "," << io::format_double(v.real()) << ","
                      << io::format_double(v.imag());
            }
            v_csv << "\n";
        }
        io::write_file_atomic(base.string() + "_v.csv", v_csv.str());

        nlohmann::json meta;
        meta["time"] = state.time;
        meta["K"] = K;
        meta["order"] = order;
        meta["seed"] = state.seed;
        meta["step_index"] = state.step_index;
        if (with_spectrum) {
            SpectrumHyper hyper;  // grid metadata only; hyper fields informational
            save_spectrum_csv(base.string() + "_spectrum.csv", state.spectrum, hyper);
            meta["spectrum"] = base.filename().string() + "_spectrum.csv";
        } else {
            meta["spectrum"] = nullptr;
        }
        io::write_file_atomic(base.string() + ".json", meta.dump(2) + "\n");
    }

    void save_mode_std(int step, const Eigen::VectorXd& mode_std) const {
        if (mode_std.size() == 0) return;
        const std::filesystem::path base = step_base(dir_, step);
        std::ostringstream out;
        out << "k,std_u0\n";
        for (int k = 0; k < mode_std.size(); ++k)
            out << k << "," << io::format_double(mode_std(k)) << "\n";
        io::write_file_atomic(base.string() + "_std.csv", out.str());
    }

    void append_metrics(const MetricsRow& row) const {
        std::ofstream out(metrics_path_, std::ios::app);
        if (!out) throw IoError("cannot append to " + metrics_path_.string());
        out << row.step << "," << io::format_double(row.time) << ",";
        if (row.rel_l2_vs_reference) out << io::format_double(*row.rel_l2_vs_reference);
        out << "," << io::format_double(row.total_power) << "," << row.optimizer_iters << ","
            << io::format_double(row.grad_norm) << "\n";
    }

    static SimState load_state(const std::filesystem::path& dir, int step) {
        const std::filesystem::path base = step_base(dir, step);
        const std::string meta_text = io::read_file(base.string() + ".json");
        const nlohmann::json meta = nlohmann::json::parse(meta_text);

        SimState s;
        s.time = meta.at("time").get<double>();
        s.K = meta.at("K").get<int>();
        s.order = meta.at("order").get<int>();
        s.seed = meta.at("seed").get<std::uint64_t>();
        s.step_index = meta.at("step_index").get<std::uint64_t>();
        s.modes.resize(static_cast<std::size_t>(s.K / 2 + 1));
        for (auto& m : s.modes) {
            m.u = Eigen::VectorXcd::Zero(s.order + 1);
            m.v = Eigen::VectorXcd::Zero(s.order);
        }

        const auto load_matrix = [&](const std::string& suffix, int cols) {
            std::ifstream in(base.string() + suffix);
            if (!in) throw IoError("cannot open " + base.string() + suffix);
            std::string line;
            std::getline(in, line);  // header
            std::vector<std::vector<double>> rows;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                std::vector<double> row;
                std::size_t pos = 0;
                while (pos != std::string::npos) {
                    const std::size_t next = line.find(',', pos);
                    row.push_back(std::stod(line.substr(
                        pos, next == std::string::npos ? next : next - pos)));
                    pos = next == std::string::npos ? next : next + 1;
                }
                if (static_cast<int>(row.size()) != cols)
                    throw IoError(base.string() + suffix + ": bad column count");
                rows.push_back(std::move(row));
            }
            return rows;
        };

        for (const auto& row : load_matrix("_u.csv", 2 * (s.order + 1) + 1)) {
            const int k = static_cast<int>(row[0]);
            if (k < 0) continue;  // negative modes are redundant conjugates
            for (int c = 0; c <= s.order; ++c)
                s.mode(k).u(c) = Complex(row[static_cast<std::size_t>(1 + 2 * c)],
                                         row[static_cast<std::size_t>(2 + 2 * c)]);
        }
        for (const auto& row : load_matrix("_v.csv", 2 * s.order + 1)) {
            const int k = static_cast<int>(row[0]);
            if (k < 0) continue;
            for (int c = 0; c < s.order; ++c)
                s.mode(k).v(c) = Complex(row[static_cast<std::size_t>(1 + 2 * c)],
                                         row[static_cast<std::size_t>(2 + 2 * c)]);
        }

        if (!meta.at("spectrum").is_null()) {
            s.spectrum = load_spectrum_csv(base.string() + "_spectrum.csv");
        } else {
            s.spectrum = power_law_spectrum(-6.0, 1.0, 2, default_l_max(s.K, 1));
        }
        return s;
    }

    static std::optional<Eigen::VectorXd> load_mode_std(const std::filesystem::path& dir,
                                                        int step) {
        const std::filesystem::path base = step_base(dir, step);
        std::ifstream in(base.string() + "_std.csv");
        if (!in) return std::nullopt;
        std::string line;
        std::getline(in, line);
        std::vector<double> vals;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto comma = line.find(',');
            vals.push_back(std::stod(line.substr(comma + 1)));
        }
        Eigen::VectorXd out(static_cast<int>(vals.size()));
        for (std::size_t i = 0; i < vals.size(); ++i) out(static_cast<int>(i)) = vals[i];
        return out;
    }

    static int count_steps(const std::filesystem::path& dir) {
        int n = 0;
        while (std::filesystem::exists(step_base(dir, n + 1).string() + ".json")) ++n;
        return n;
    }

    static nlohmann::json load_manifest(const std::filesystem::path& dir) {
        return nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    }

  private:
    std::filesystem::path dir_;
    std::filesystem::path metrics_path_;
};

/// Spectral-derivative lift of plain grid values into a full state record,
/// used to persist reference trajectories in the common snapshot format.
inline SimState state_from_values(const std::vector<double>& values, int order, double time,
                                  double nu_for_rhs, bool dealias, bool advection) {
    const int K = static_cast<int>(values.size());
    SpatialGrid grid(K);
    const FourierField c = dft_analyze(values, grid);
    FourierField rhs(K);
    if (advection) {
        rhs = detail::burgers_rhs_modes(c, nu_for_rhs, grid, dealias);
    } else {
        for (int k = 0; k <= K / 2; ++k)
            rhs.set(k, nu_for_rhs * derivative_factor(k, 2, K) * c.at(k));
    }

    SimState s;
    s.time = time;
    s.K = K;
    s.order = order;
    s.spectrum = power_law_spectrum(-6.0, 1.0, 2, default_l_max(K, 1));
    s.modes.resize(static_cast<std::size_t>(K / 2 + 1));
    for (int k = 0; k <= K / 2; ++k) {
        s.mode(k).u.resize(order + 1);
        s.mode(k).v.resize(order);
        for (int c2 = 0; c2 <= order; ++c2)
            s.mode(k).u(c2) = c.at(k) * derivative_factor(k, c2, K);
        for (int c2 = 1; c2 <= order; ++c2)
            s.mode(k).v(c2 - 1) = rhs.at(k) * derivative_factor(k, c2, K);
    }
    return s;
}

}  // namespace pspde
