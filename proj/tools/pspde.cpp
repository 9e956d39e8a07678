// Command-line driver: probabilistic simulation runs, reference and
// trapezoidal baselines, run-vs-truth comparison reports, per-step spectrum
// estimation from reference trajectories, and SVG figures.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pspde/baselines.hpp"
#include "pspde/filter.hpp"
#include "pspde/io.hpp"
#include "pspde/svg.hpp"

namespace fs = std::filesystem;
using namespace pspde;

namespace {

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_relative()) {
        if (const char* root = std::getenv("PSPDE_OUT_ROOT")) return fs::path(root) / p;
    }
    return p;
}

std::vector<double> profile_values(const GaussianProfile& prof, int K) {
    SpatialGrid grid(K);
    std::vector<double> v(static_cast<std::size_t>(K), 0.0);
    int m_max = 1;
    while (m_max < 64 &&
           std::exp(-(m_max - 1.0) * (m_max - 1.0) / (2.0 * prof.width * prof.width)) > 1e-16)
        ++m_max;
    for (int j = 0; j < K; ++j) {
        const double x = grid.position(j);
        for (int m = -m_max; m <= m_max; ++m) {
            const double t = x - prof.center - m;
            v[static_cast<std::size_t>(j)] +=
                prof.amplitude * std::exp(-t * t / (2.0 * prof.width * prof.width));
        }
    }
    return v;
}

double pointwise_std_from_modes(const Eigen::VectorXd& mode_std) {
    if (mode_std.size() == 0) return 0.0;
    double var = mode_std(0) * mode_std(0);
    const int last = static_cast<int>(mode_std.size()) - 1;
    var += mode_std(last) * mode_std(last);
    for (int k = 1; k < last; ++k) var += 2.0 * mode_std(k) * mode_std(k);
    return std::sqrt(var);
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::optional<std::uint64_t> seed_override) {
    const fs::path cfg_file(config_path);
    RunSetup setup = parse_run_setup(io::read_file(cfg_file), cfg_file.parent_path());
    if (seed_override) setup.run.seed = *seed_override;
    RunConfig& rc = setup.run;

    const fs::path out = resolve_out(out_dir);

    if (setup.solver == SolverKind::Probabilistic) {
        const PdeModel pde = make_pde(rc.pde_name, rc.nu);
        const SpatialGrid grid(rc.K);
        const double l_max = default_l_max(rc.K, rc.hyper.n_max);

        LogSpectrum tau0;
        if (rc.spectrum_mode == SpectrumMode::FixedFromFile) {
            rc.fixed_spectra = load_spectra_table(rc.spectrum_file);
            if (rc.fixed_spectra.empty())
                throw ConfigError("spectrum.file: no spectra in " + rc.spectrum_file);
            tau0 = rc.fixed_spectra.front();
        } else if (rc.spectrum_mode == SpectrumMode::FixedPowerLaw) {
            tau0 = power_law_spectrum(rc.power_law_exponent, rc.power_law_amplitude,
                                      rc.tau_nodes, l_max);
        } else if (!rc.offset_auto && !rc.offset_rms) {
            // Adaptive with a pinned level: plain power law from the hypers.
            Eigen::VectorXd tau(rc.tau_nodes);
            const double dl = l_max / (rc.tau_nodes - 1);
            for (int m = 0; m < rc.tau_nodes; ++m)
                tau(m) = rc.hyper.offset + rc.hyper.slope * m * dl;
            tau0 = LogSpectrum(tau, l_max, std::exp(rc.hyper.offset));
        } else {
            tau0 = power_law_spectrum(-6.0, 1.0, rc.tau_nodes, l_max);  // placeholder grid
        }

        SimState init =
            initial_state_from_profile(rc.profile, tau0, grid, pde.order, pde, rc.seed);
        if (rc.spectrum_mode == SpectrumMode::Adaptive && rc.offset_auto) {
            // offset = auto: anchor the initial spectrum to the state's
            // acceleration content, which is the quantity sigma drives.
            init.spectrum = acceleration_anchored_spectrum(init, pde, rc.tau_nodes, l_max,
                                                           rc.hyper.slope);
            tau0 = init.spectrum;
        } else if (rc.spectrum_mode == SpectrumMode::Adaptive && rc.offset_rms) {
            // offset = rms: power law pinned at the field's log-RMS level.
            const double offset = default_offset_from_field(init);
            Eigen::VectorXd tau(rc.tau_nodes);
            const double dl = l_max / (rc.tau_nodes - 1);
            for (int m = 0; m < rc.tau_nodes; ++m) tau(m) = offset + rc.hyper.slope * m * dl;
            init.spectrum = LogSpectrum(tau, l_max, std::exp(offset));
            tau0 = init.spectrum;
        }

        const auto stack0 = build_mode_covariances(rc.K, pde.order, tau0, rc.hyper);
        if (stack0.tail_warning)
            std::fprintf(stderr,
                         "warning: spectrum decays too slowly; the n_max=%d alias still "
                         "contributes at mode k=%d\n",
                         rc.hyper.n_max, stack0.tail_warning_mode);

        TrajectoryStore store(out, "probabilistic", setup.config_text, rc.seed);
        store.save_state(0, init);

        const FourierField c0 = dft_analyze(profile_values(rc.profile, rc.K), grid);
        const bool have_truth = rc.pde_name == "diffusion";
        bool any_failed = false;

        const StepCallback on_step = [&](int step, const StepResult& r) {
            store.save_state(step, r.state);
            store.save_mode_std(step, r.mode_std);
            MetricsRow row;
            row.step = step;
            row.time = r.state.time;
            row.total_power = r.state.spectrum.resolved_power(rc.K);
            row.optimizer_iters = r.telemetry.iterations;
            row.grad_norm = r.telemetry.grad_norm;
            if (have_truth) {
                const auto truth =
                    dft_synthesize(analytic_diffusion(c0, rc.nu, r.state.time), grid);
                row.rel_l2_vs_reference = rel_l2_error(r.state.field_values(), truth);
            }
            store.append_metrics(row);
            if (!r.telemetry.converged) any_failed = true;
        };

        run_simulation(rc, init, pde, on_step);
        if (any_failed)
            std::fprintf(stderr, "warning: some steps were flagged as non-converged\n");
        return 0;
    }

    // Baseline solvers share the snapshot format, tagged by kind.
    const bool burgers = rc.pde_name == "burgers";
    if (setup.solver == SolverKind::Reference) {
        const int K_ref = setup.reference_resolution;
        const double dt = setup.reference_dt > 0.0 ? setup.reference_dt : rc.delta / 100.0;
        const auto v0 = profile_values(rc.profile, K_ref);
        std::vector<double> times;
        for (int i = 1; i <= rc.steps; ++i) times.push_back(i * rc.delta);

        TrajectoryStore store(out, "reference", setup.config_text, rc.seed);
        if (burgers) {
            const auto sol = reference_burgers(v0, rc.nu, dt, times, setup.reference_self_check);
            for (std::size_t i = 0; i < sol.values.size(); ++i) {
                SimState s = state_from_values(sol.values[i], 2, sol.times[i], rc.nu, true, true);
                s.step_index = i;
                store.save_state(static_cast<int>(i), s, /*with_spectrum=*/false);
                MetricsRow row;
                row.step = static_cast<int>(i);
                row.time = sol.times[i];
                store.append_metrics(row);
            }
        } else {
            const SpatialGrid fine(K_ref);
            const FourierField c0 = dft_analyze(v0, fine);
            for (int i = 0; i <= rc.steps; ++i) {
                const double t = i * rc.delta;
                const auto vals = dft_synthesize(analytic_diffusion(c0, rc.nu, t), fine);
                SimState s = state_from_values(vals, 2, t, rc.nu, true, false);
                s.step_index = static_cast<std::uint64_t>(i);
                store.save_state(i, s, /*with_spectrum=*/false);
                MetricsRow row;
                row.step = i;
                row.time = t;
                store.append_metrics(row);
            }
        }
        return 0;
    }

    // Trapezoidal chain at the coarse resolution.
    const PdeModel pde = make_pde(rc.pde_name, rc.nu);
    auto values = profile_values(rc.profile, rc.K);
    TrajectoryStore store(out, "trapezoidal", setup.config_text, rc.seed);
    {
        SimState s = state_from_values(values, pde.order, 0.0, rc.nu, false, burgers);
        store.save_state(0, s, false);
        MetricsRow row;
        store.append_metrics(row);
    }
    for (int i = 1; i <= rc.steps; ++i) {
        values = trapezoidal_step(values, pde, rc.delta_at(i));
        SimState s = state_from_values(values, pde.order, i * rc.delta, rc.nu, false, burgers);
        s.step_index = static_cast<std::uint64_t>(i);
        store.save_state(i, s, false);
        MetricsRow row;
        row.step = i;
        row.time = i * rc.delta;
        store.append_metrics(row);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

int cmd_compare(const std::string& run_dir, const std::string& reference,
                const std::string& out_file) {
    const fs::path run(run_dir);
    const int n_steps = TrajectoryStore::count_steps(run);
    const SimState s0 = TrajectoryStore::load_state(run, 0);
    const int K = s0.K;
    const SpatialGrid grid(K);

    // Truth provider per step time.
    std::function<std::vector<double>(int, double)> truth_at;
    if (reference == "analytic") {
        const RunSetup setup = parse_run_setup(io::read_file(run / "config.cfg"));
        if (setup.run.pde_name != "diffusion")
            throw ConfigError("compare --reference analytic requires a diffusion run");
        const double nu = setup.run.nu;
        FourierField c0(K);
        for (int k = 0; k <= K / 2; ++k) c0.set(k, s0.mode(k).u(0));
        truth_at = [c0, nu, grid](int, double t) {
            return dft_synthesize(analytic_diffusion(c0, nu, t), grid);
        };
    } else {
        const fs::path ref(reference);
        const int n_ref = TrajectoryStore::count_steps(ref);
        truth_at = [ref, n_ref, K](int, double t) {
            for (int i = 0; i <= n_ref; ++i) {
                const SimState r = TrajectoryStore::load_state(ref, i);
                if (std::abs(r.time - t) < 1e-9 * std::max(1.0, std::abs(t))) {
                    if (r.K == K) return r.field_values();
                    if (r.K < K || r.K % K != 0)
                        throw DimensionError("compare: reference grid " + std::to_string(r.K) +
                                             " is not a multiple of the run grid " +
                                             std::to_string(K));
                    return restrict_values(r.field_values(), K);
                }
            }
            throw ContractError("compare: no reference snapshot at t = " + std::to_string(t));
        };
    }

    std::ostringstream csv;
    csv << "step,x,truth,mean,residual,posterior_std\n";
    nlohmann::json per_step = nlohmann::json::array();
    std::int64_t within = 0, counted = 0;

    for (int i = 0; i <= n_steps; ++i) {
        const SimState s = TrajectoryStore::load_state(run, i);
        const auto mean = s.field_values();
        const auto truth = truth_at(i, s.time);
        const auto mode_std = TrajectoryStore::load_mode_std(run, i);
        const double pstd = mode_std ? pointwise_std_from_modes(*mode_std) : 0.0;

        for (int j = 0; j < K; ++j) {
            const double resid = truth[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)];
            csv << i << "," << io::format_double(grid.position(j)) << ","
                << io::format_double(truth[static_cast<std::size_t>(j)]) << ","
                << io::format_double(mean[static_cast<std::size_t>(j)]) << ","
                << io::format_double(resid) << "," << io::format_double(pstd) << "\n";
            if (pstd > 0.0 && i > 0) {
                ++counted;
                if (std::abs(resid) <= 3.0 * pstd) ++within;
            }
        }
        nlohmann::json row;
        row["step"] = i;
        row["time"] = s.time;
        row["rel_l2"] = rel_l2_error(mean, truth);
        per_step.push_back(row);
    }

    const fs::path out = resolve_out(out_file);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::write_file_atomic(out, csv.str());

    nlohmann::json summary;
    summary["per_step"] = per_step;
    if (counted)
        summary["calibration_fraction"] =
            static_cast<double>(within) / static_cast<double>(counted);
    else
        summary["calibration_fraction"] = nullptr;
    io::write_file_atomic(out.string() + ".summary.json", summary.dump(2) + "\n");
    return 0;
}

// ---------------------------------------------------------------------------
// spectrum-from-truth
// ---------------------------------------------------------------------------

int cmd_spectrum_from_truth(const std::string& ref_dir, const std::string& range,
                            const std::string& out_file, int K, double sigma_tau, int n_max,
                            int nodes, const std::string& offset_str, double slope) {
    const fs::path ref(ref_dir);
    const int n_ref = TrajectoryStore::count_steps(ref);
    const RunSetup setup = parse_run_setup(io::read_file(ref / "config.cfg"));

    int a = 1, b = 0;
    if (!range.empty()) {
        const auto colon = range.find(':');
        if (colon == std::string::npos)
            throw ConfigError("--steps: expected FIRST:LAST, got '" + range + "'");
        a = std::stoi(range.substr(0, colon));
        b = std::stoi(range.substr(colon + 1));
    } else {
        b = n_ref;
    }
    if (a < 1) throw ConfigError("--steps: first step must be >= 1");
    if (b > n_ref) throw ConfigError("--steps: reference has only " + std::to_string(n_ref) +
                                     " steps");

    const fs::path out = resolve_out(out_file);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::vector<LogSpectrum> fits;
    if (b < a) {  // empty range: empty table, success
        save_spectra_table(out, fits);
        return 0;
    }

    const int order = 2;
    const double l_max = default_l_max(K, n_max);
    SpectrumHyper hyper;
    hyper.sigma_tau = sigma_tau;
    hyper.n_max = n_max;
    hyper.slope = slope;

    // Cache coarse states once per needed snapshot.
    std::vector<TrueStates> states;
    for (int i = a - 1; i <= b; ++i)
        states.push_back(true_states_from_reference(
            [&] {
                ReferenceSolution sol;
                const SimState s = TrajectoryStore::load_state(ref, i);
                sol.K_ref = s.K;
                sol.dealiased = true;
                sol.values.push_back(s.field_values());
                sol.times.push_back(s.time);
                return sol;
            }(),
            0, K, setup.run.nu, order));

    if (offset_str == "auto") {
        double acc = 0.0;
        for (int k = 1; k <= K / 2; ++k) acc += std::norm(states.front().u[static_cast<std::size_t>(k)](0));
        hyper.offset = 0.5 * std::log(std::max(acc / (K / 2), 1e-300));
    } else {
        hyper.offset = std::stod(offset_str);
    }
    const double sigma0 = std::exp(hyper.offset);

    OptimOptions oo;
    oo.max_iters = 400;
    const double delta = setup.run.delta;
    for (int i = a; i <= b; ++i) {
        const auto fit = spectrum_from_truth(states[static_cast<std::size_t>(i - a)],
                                             states[static_cast<std::size_t>(i - a + 1)], delta,
                                             hyper, nodes, l_max, sigma0, K, order, oo);
        if (!fit.telemetry.converged)
            std::fprintf(stderr, "warning: spectrum fit for step %d flagged non-converged\n", i);
        fits.push_back(fit.spectrum);
    }
    save_spectra_table(out, fits);
    return 0;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct CompareRow {
    int step;
    double x, truth, mean, residual, posterior_std;
};

std::vector<CompareRow> load_compare_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open compare file " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<CompareRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CompareRow r;
        std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf", &r.step, &r.x, &r.truth, &r.mean,
                    &r.residual, &r.posterior_std);
        rows.push_back(r);
    }
    return rows;
}

int cmd_plot(const std::string& run_dir, const std::string& kind, const std::string& out_file,
             int step_sel, const std::string& compare_file) {
    const fs::path run(run_dir);
    const fs::path out = resolve_out(out_file);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    svg::Chart chart;

    if (kind == "step" || kind == "calibration") {
        fs::path cmp = compare_file.empty() ? run / "compare.csv" : fs::path(compare_file);
        const auto rows = load_compare_csv(cmp);
        if (rows.empty()) throw IoError("compare file has no rows: " + cmp.string());
        int step = step_sel >= 0 ? step_sel : rows.back().step;

        svg::Series truth, mean, band_up, band_dn;
        truth.color = "#2ca02c";
        truth.label = "truth";
        mean.color = "#d62728";
        mean.label = "posterior mean";
        band_up.color = "#888888";
        band_up.dash = "3,3";
        band_up.label = "+-3 std";
        band_dn = band_up;
        band_dn.label.clear();
        for (const auto& r : rows) {
            if (r.step != step) continue;
            if (kind == "step") {
                truth.x.push_back(r.x);
                truth.y.push_back(r.truth);
                mean.x.push_back(r.x);
                mean.y.push_back(r.mean);
                band_up.x.push_back(r.x);
                band_up.y.push_back(r.mean + 3 * r.posterior_std);
                band_dn.x.push_back(r.x);
                band_dn.y.push_back(r.mean - 3 * r.posterior_std);
            } else {
                truth.x.push_back(r.x);
                truth.y.push_back(std::abs(r.residual));
                band_up.x.push_back(r.x);
                band_up.y.push_back(3 * r.posterior_std);
            }
        }
        if (truth.x.empty()) throw IoError("no rows for step " + std::to_string(step));
        if (kind == "step") {
            chart.title = "state at step " + std::to_string(step);
            chart.series = {band_up, band_dn, truth, mean};
        } else {
            chart.title = "residuals vs 3 std at step " + std::to_string(step);
            truth.label = "|residual|";
            truth.color = "#d62728";
            band_up.label = "3 std";
            chart.series = {band_up, truth};
        }
        chart.x_label = "x";
        chart.y_label = kind == "step" ? "s(x)" : "|truth - mean|";
    } else if (kind == "evolution") {
        const int n = TrajectoryStore::count_steps(run);
        if (n < 0) throw IoError("no steps in " + run.string());
        for (int i = 0; i <= n; ++i) {
            const SimState s = TrajectoryStore::load_state(run, i);
            const auto vals = s.field_values();
            svg::Series ser;
            ser.color = svg::ramp_color(n == 0 ? 0.0 : static_cast<double>(i) / n);
            ser.stroke_width = 1.0;
            for (int j = 0; j < s.K; ++j) {
                ser.x.push_back(static_cast<double>(j) / s.K);
                ser.y.push_back(vals[static_cast<std::size_t>(j)]);
            }
            chart.series.push_back(std::move(ser));
        }
        chart.title = "field evolution (warm = early)";
        chart.x_label = "x";
        chart.y_label = "s(x)";
    } else if (kind == "spectra") {
        const int n = TrajectoryStore::count_steps(run);
        const SimState s0 = TrajectoryStore::load_state(run, 0);
        for (int i = 0; i <= n; ++i) {
            const fs::path f = TrajectoryStore::step_base(run, i).string() + "_spectrum.csv";
            if (!fs::exists(f)) continue;
            const LogSpectrum spec = load_spectrum_csv(f);
            svg::Series ser;
            ser.color = svg::ramp_color(n == 0 ? 0.0 : static_cast<double>(i) / n);
            ser.stroke_width = 1.0;
            for (int m = 0; m < spec.size(); ++m) {
                ser.x.push_back(spec.node(m));
                ser.y.push_back(spec.tau(m));
            }
            chart.series.push_back(std::move(ser));
        }
        if (chart.series.empty()) throw IoError("no spectrum files in " + run.string());
        chart.v_lines.push_back(std::log(s0.K / 2.0));
        chart.title = "log-spectra per step (dashed: largest resolved mode)";
        chart.x_label = "l = log |k|";
        chart.y_label = "tau(l)";
    } else {
        throw ConfigError("plot --kind: expected step, evolution, spectra or calibration");
    }

    io::write_file_atomic(out, chart.render());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probabilistic spectral simulation of periodic 1+1D PDEs"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed_override;
    auto* run = app.add_subcommand("run", "execute a simulation or baseline run");
    run->add_option("--config", config_path, "run configuration file")->required();
    run->add_option("--out", out_dir, "output run directory")->required();
    std::uint64_t seed_val = 0;
    auto* seed_opt = run->add_option("--seed", seed_val, "override run.seed");

    std::string cmp_run, cmp_ref, cmp_out;
    auto* compare = app.add_subcommand("compare", "compare a run against a reference");
    compare->add_option("--run", cmp_run, "run directory")->required();
    compare->add_option("--reference", cmp_ref, "reference run directory or 'analytic'")
        ->required();
    compare->add_option("--out", cmp_out, "output CSV path")->required();

    std::string sft_ref, sft_range, sft_out, sft_offset = "auto";
    int sft_k = 128, sft_nmax = 100, sft_nodes = 500;
    double sft_sigma_tau = 25.0, sft_slope = -3.0;
    auto* sft = app.add_subcommand("spectrum-from-truth",
                                   "estimate per-step spectra from a reference trajectory");
    sft->add_option("--reference", sft_ref, "reference run directory")->required();
    sft->add_option("--steps", sft_range, "step range FIRST:LAST (default: all)");
    sft->add_option("--out", sft_out, "output spectra CSV")->required();
    sft->add_option("--K", sft_k, "coarse resolution the spectra are fitted at");
    sft->add_option("--sigma-tau", sft_sigma_tau, "smoothness prior amplitude");
    sft->add_option("--n-max", sft_nmax, "aliasing truncation");
    sft->add_option("--nodes", sft_nodes, "log-frequency grid size");
    sft->add_option("--offset", sft_offset, "power-law offset or 'auto'");
    sft->add_option("--slope", sft_slope, "power-law slope");

    std::string plot_run, plot_kind, plot_out, plot_cmp;
    int plot_step = -1;
    auto* plot = app.add_subcommand("plot", "render an SVG figure from stored CSV data");
    plot->add_option("--run", plot_run, "run directory")->required();
    plot->add_option("--kind", plot_kind, "step | evolution | spectra | calibration")
        ->required();
    plot->add_option("--out", plot_out, "output SVG path")->required();
    plot->add_option("--step", plot_step, "step selector (default: last)");
    plot->add_option("--compare", plot_cmp, "compare CSV (for step/calibration kinds)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            if (*seed_opt) seed_override = seed_val;
            return cmd_run(config_path, out_dir, seed_override);
        }
        if (*compare) return cmd_compare(cmp_run, cmp_ref, cmp_out);
        if (*sft)
            return cmd_spectrum_from_truth(sft_ref, sft_range, sft_out, sft_k, sft_sigma_tau,
                                           sft_nmax, sft_nodes, sft_offset, sft_slope);
        if (*plot) return cmd_plot(plot_run, plot_kind, plot_out, plot_step, plot_cmp);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
