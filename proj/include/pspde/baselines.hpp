#pragma once

// Ground-truth generators and comparison baselines: exact per-mode diffusion
// decay, a dealiased pseudo-spectral Runge-Kutta reference for Burgers, the
// spectral trapezoidal rule, and maximum-posterior spectrum estimation from a
// pair of consecutive true states.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pspde/errors.hpp"
#include "pspde/fourier.hpp"
#include "pspde/gaussian.hpp"
#include "pspde/lbfgs.hpp"
#include "pspde/pde.hpp"
#include "pspde/spectrum.hpp"

namespace pspde {

/// Exact evolution of band-limited initial data under ds/dt = nu s^(2):
/// every mode decays by exp(-nu (2 pi k)^2 t).
inline FourierField analytic_diffusion(const FourierField& initial, double nu, double t) {
    if (t < 0.0) throw ContractError("analytic_diffusion: t must be >= 0");
    const int K = initial.grid_size();
    FourierField out(K);
    for (int k = 0; k <= K / 2; ++k) {
        const double rate = nu * kTwoPi * k * kTwoPi * k;
        out.set(k, initial.at(k) * std::exp(-rate * t));
    }
    return out;
}

struct ReferenceSolution {
    std::vector<double> times;
    std::vector<std::vector<double>> values;  // grid values at K_ref points per time
    int K_ref = 0;
    double dt_ref = 0.0;
    bool dealiased = true;
};

namespace detail {

/// Dealiased (2/3 rule) pseudo-spectral Burgers right-hand side in mode space.
inline FourierField burgers_rhs_modes(const FourierField& c, double nu,
                                      const SpatialGrid& grid, bool dealias) {
    const int K = grid.K;
    const int cutoff = K / 3;
    FourierField cm(K), cdx(K);
    for (int k = 0; k <= K / 2; ++k) {
        const bool keep = !dealias || k <= cutoff;
        const Complex v = keep ? c.at(k) : Complex(0.0, 0.0);
        cm.set(k, v);
        cdx.set(k, v * derivative_factor(k, 1, K));
    }
    const auto s = dft_synthesize(cm, grid);
    const auto sx = dft_synthesize(cdx, grid);
    std::vector<double> nl(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j)
        nl[static_cast<std::size_t>(j)] =
            -s[static_cast<std::size_t>(j)] * sx[static_cast<std::size_t>(j)];
    FourierField out = dft_analyze(nl, grid);
    for (int k = 0; k <= K / 2; ++k) {
        Complex v = (!dealias || k <= cutoff) ? out.at(k) : Complex(0.0, 0.0);
        v += nu * derivative_factor(k, 2, K) * c.at(k);
        out.set(k, v);
    }
    return out;
}

inline FourierField rk4_step(const FourierField& c, double dt, double nu,
                             const SpatialGrid& grid, bool dealias) {
    const int K = grid.K;
    auto axpy = [K](const FourierField& a, double s, const FourierField& b) {
        FourierField out(K);
        for (int k = 0; k <= K / 2; ++k) out.set(k, a.at(k) + s * b.at(k));
        return out;
    };
    const FourierField k1 = burgers_rhs_modes(c, nu, grid, dealias);
    const FourierField k2 = burgers_rhs_modes(axpy(c, dt / 2, k1), nu, grid, dealias);
    const FourierField k3 = burgers_rhs_modes(axpy(c, dt / 2, k2), nu, grid, dealias);
    const FourierField k4 = burgers_rhs_modes(axpy(c, dt, k3), nu, grid, dealias);
    FourierField out(K);
    for (int k = 0; k <= K / 2; ++k)
        out.set(k, c.at(k) + dt / 6.0 * (k1.at(k) + 2.0 * k2.at(k) + 2.0 * k3.at(k) + k4.at(k)));
    return out;
}

inline double l2_norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

inline ReferenceSolution integrate_burgers(const std::vector<double>& initial, double nu,
                                           double dt_ref, const std::vector<double>& snap_times,
                                           bool dealias) {
    const int K = static_cast<int>(initial.size());
    SpatialGrid grid(K);
    ReferenceSolution out;
    out.K_ref = K;
    out.dt_ref = dt_ref;
    out.dealiased = dealias;

    const double norm0 = l2_norm(initial);
    FourierField c = dft_analyze(initial, grid);
    double t = 0.0;
    out.times.push_back(0.0);
    out.values.push_back(initial);

    for (double target : snap_times) {
        if (target <= t + 1e-15) continue;
        const int n_sub = std::max(1, static_cast<int>(std::ceil((target - t) / dt_ref - 1e-9)));
        const double dt = (target - t) / n_sub;
        for (int i = 0; i < n_sub; ++i) c = rk4_step(c, dt, nu, grid, dealias);
        t = target;
        auto vals = dft_synthesize(c, grid);
        if (!std::isfinite(l2_norm(vals)) || l2_norm(vals) > 10.0 * std::max(norm0, 1e-300))
            throw NumericalError("reference solver: solution norm grew past 10x the input at t=" +
                                 std::to_string(t) + " (time step too large for the dynamics)");
        out.times.push_back(t);
        out.values.push_back(std::move(vals));
    }
    return out;
}

}  // namespace detail

/// High-resolution dealiased RK4 reference for the viscous Burgers equation,
/// sampled at the requested snapshot times. Doubles as a diffusion reference
/// when the initial data is evolved with the nonlinear term negligible.
/// The run is repeated at half the time step; a relative disagreement above
/// 1e-8 at the final snapshot aborts.
inline ReferenceSolution reference_burgers(const std::vector<double>& initial, double nu,
                                           double dt_ref, const std::vector<double>& snap_times,
                                           bool self_check = true, bool dealias = true) {
    if (dt_ref <= 0.0) throw ContractError("reference_burgers: dt_ref must be positive");
    ReferenceSolution sol = detail::integrate_burgers(initial, nu, dt_ref, snap_times, dealias);
    if (self_check && !snap_times.empty()) {
        const ReferenceSolution half =
            detail::integrate_burgers(initial, nu, dt_ref / 2.0, snap_times, dealias);
        double num = 0.0, den = 0.0;
        const auto& a = sol.values.back();
        const auto& b = half.values.back();
        for (std::size_t j = 0; j < a.size(); ++j) {
            num += (a[j] - b[j]) * (a[j] - b[j]);
            den += b[j] * b[j];
        }
        if (std::sqrt(num / std::max(den, 1e-300)) > 1e-8)
            throw NumericalError(
                "reference solver: halving dt changed the final state by more than 1e-8; "
                "decrease dt_ref");
    }
    return sol;
}

/// Exact subsampling of a fine-grid snapshot onto K points (K_ref/K integer).
inline std::vector<double> restrict_values(const std::vector<double>& fine, int K) {
    const int K_ref = static_cast<int>(fine.size());
    if (K_ref < K || K_ref % K != 0)
        throw DimensionError("restrict_values: K_ref must be an integer multiple of K");
    const int stride = K_ref / K;
    std::vector<double> out(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j)
        out[static_cast<std::size_t>(j)] = fine[static_cast<std::size_t>(j * stride)];
    return out;
}

/// Relative L2 distance between two grid functions.
inline double rel_l2_error(const std::vector<double>& approx, const std::vector<double>& truth) {
    if (approx.size() != truth.size()) throw DimensionError("rel_l2_error: size mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        num += (approx[j] - truth[j]) * (approx[j] - truth[j]);
        den += truth[j] * truth[j];
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

/// One implicit trapezoidal step s^i = s^{i-1} + dt/2 (F(s^{i-1}) + F(s^i))
/// with spectral spatial derivatives. The linearization of F at zero is
/// treated implicitly per mode; the remainder iterates to a 1e-12 relative
/// residual.
inline std::vector<double> trapezoidal_step(const std::vector<double>& values,
                                            const PdeModel& pde, double delta) {
    const int K = static_cast<int>(values.size());
    SpatialGrid grid(K);

    auto rhs_modes = [&](const FourierField& c) {
        ModeVectors u(static_cast<std::size_t>(K / 2 + 1), Eigen::VectorXcd::Zero(pde.order + 1));
        for (int k = 0; k <= K / 2; ++k)
            for (int d = 0; d <= pde.order; ++d)
                u[static_cast<std::size_t>(k)](d) = c.at(k) * derivative_factor(k, d, K);
        return g_eval(u, pde, grid);
    };

    // Linear symbol at zero state, used as the implicit preconditioner.
    std::vector<double> zero(static_cast<std::size_t>(pde.order + 1), 0.0);
    std::vector<Complex> symbol(static_cast<std::size_t>(K / 2 + 1), Complex(0.0, 0.0));
    for (int k = 0; k <= K / 2; ++k)
        for (int d = 0; d <= pde.order; ++d)
            symbol[static_cast<std::size_t>(k)] +=
                pde.partial(std::span<const double>(zero.data(), zero.size()), d) *
                derivative_factor(k, d, K);

    const FourierField c_prev = dft_analyze(values, grid);
    const FourierField f_prev = rhs_modes(c_prev);

    double scale = 0.0;
    for (int k = 0; k <= K / 2; ++k) scale = std::max(scale, std::abs(c_prev.at(k)));

    FourierField c = c_prev;
    const int max_iters = 400;
    for (int it = 0; it < max_iters; ++it) {
        const FourierField f_cur = rhs_modes(c);
        // Residual of the trapezoidal equation, relative to the magnitude of
        // the terms entering it (the equation itself cancels heavily for
        // stiff modes).
        double res = 0.0;
        double term_scale = std::max(scale, 1e-300);
        FourierField next(K);
        for (int k = 0; k <= K / 2; ++k) {
            const Complex target =
                c_prev.at(k) + 0.5 * delta * (f_prev.at(k) + f_cur.at(k));
            res = std::max(res, std::abs(target - c.at(k)));
            term_scale = std::max(term_scale,
                                  std::abs(c.at(k)) +
                                      0.5 * delta * (std::abs(f_prev.at(k)) +
                                                     std::abs(f_cur.at(k))));
            // Implicit update on the linear part: solve
            // (1 - dt/2 L_k) c_new = c_prev + dt/2 (f_prev + f_cur - L_k c_cur).
            const Complex lk = symbol[static_cast<std::size_t>(k)];
            const Complex rhs = c_prev.at(k) +
                                0.5 * delta * (f_prev.at(k) + f_cur.at(k) - lk * c.at(k));
            next.set(k, rhs / (1.0 - 0.5 * delta * lk));
        }
        if (res <= 1e-12 * term_scale) break;
        if (it == max_iters - 1)
            throw NumericalError("trapezoidal_step: implicit solve did not reach 1e-12 in " +
                                 std::to_string(max_iters) + " iterations");
        c = next;
    }
    return dft_synthesize(c, grid);
}

// ---------------------------------------------------------------------------
// Spectrum estimation from true transitions.
// ---------------------------------------------------------------------------

/// Field state and its time derivative on the coarse mode set, both carrying
/// components c = 0..o; extracted from a reference solution.
struct TrueStates {
    ModeVectors u;
    ModeVectors w;
};

/// Coarse-grid state at snapshot `index`: spectral derivatives are formed at
/// the fine resolution, subsampled onto K points, and re-analyzed, so the
/// coarse modes carry the genuine aliased content of the fine solution. The
/// time derivative comes from the reference dynamics' own right-hand side.
inline TrueStates true_states_from_reference(const ReferenceSolution& ref, int index, int K,
                                             double nu, int order) {
    if (index < 0 || index >= static_cast<int>(ref.values.size()))
        throw ContractError("true_states_from_reference: snapshot index out of range");
    SpatialGrid fine(ref.K_ref);
    SpatialGrid coarse(K);
    const FourierField c_fine =
        dft_analyze(ref.values[static_cast<std::size_t>(index)], fine);
    const FourierField rhs_fine = detail::burgers_rhs_modes(c_fine, nu, fine, ref.dealiased);

    TrueStates out;
    out.u.assign(static_cast<std::size_t>(K / 2 + 1), Eigen::VectorXcd::Zero(order + 1));
    out.w.assign(static_cast<std::size_t>(K / 2 + 1), Eigen::VectorXcd::Zero(order + 1));
    for (int c = 0; c <= order; ++c) {
        FourierField dc(ref.K_ref), dw(ref.K_ref);
        for (int k = 0; k <= ref.K_ref / 2; ++k) {
            const Complex factor = derivative_factor(k, c, ref.K_ref);
            dc.set(k, c_fine.at(k) * factor);
            dw.set(k, rhs_fine.at(k) * factor);
        }
        const FourierField uc = dft_analyze(restrict_values(dft_synthesize(dc, fine), K), coarse);
        const FourierField wc = dft_analyze(restrict_values(dft_synthesize(dw, fine), K), coarse);
        for (int k = 0; k <= K / 2; ++k) {
            out.u[static_cast<std::size_t>(k)](c) = uc.at(k);
            out.w[static_cast<std::size_t>(k)](c) = wc.at(k);
        }
    }
    return out;
}

/// Transition negative log density (data part only) of moving from `prev` to
/// `next` in time delta under the Markov prior with the given spectrum.
inline double transition_nll(const TrueStates& prev, const TrueStates& next, double delta,
                             const LogSpectrum& spec, const SpectrumHyper& hyper, int K,
                             int order) {
    const auto stack = build_mode_covariances(K, order, spec, hyper);
    // Cholesky of the temporal 2x2 coupling.
    const double a = std::sqrt(delta * delta * delta / 3.0);
    const double b = (delta * delta / 2.0) / a;
    const double c = std::sqrt(delta - b * b);

    double nll = 0.0;
    for (int k = 0; k <= K / 2; ++k) {
        const bool real_mode = (k == 0 || k == K / 2);
        const double w = real_mode ? 0.5 : 1.0;
        Eigen::MatrixXcd d = stack.at(k);
        if (real_mode) d = d.real().cast<Complex>();
        const HermitianFactor f(d);
        const Eigen::VectorXcd r1 = next.u[static_cast<std::size_t>(k)] -
                                    prev.u[static_cast<std::size_t>(k)] -
                                    delta * prev.w[static_cast<std::size_t>(k)];
        const Eigen::VectorXcd r2 =
            next.w[static_cast<std::size_t>(k)] - prev.w[static_cast<std::size_t>(k)];
        const Eigen::VectorXcd rt1 = r1 / a;
        const Eigen::VectorXcd rt2 = (r2 - (b / a) * r1) / c;
        nll += w * (f.quad_form_floored(rt1) + f.quad_form_floored(rt2) +
                    2.0 * f.log_pdet_floored());
        if (!std::isfinite(nll)) return std::numeric_limits<double>::infinity();
    }
    return nll;
}

struct SpectrumFit {
    LogSpectrum spectrum;
    OptimResult telemetry;
};

/// Maximum-posterior log-spectrum explaining one true transition under the
/// full Markov prior, with the excitation-parameterized smoothness prior.
inline SpectrumFit spectrum_from_truth(const TrueStates& prev, const TrueStates& next,
                                       double delta, const SpectrumHyper& hyper, int L,
                                       double l_max, double sigma0, int K, int order,
                                       const OptimOptions& opt_in = {}) {
    hyper.validate();
    const TauExcitationMap map(L, l_max, hyper);
    const double a = std::sqrt(delta * delta * delta / 3.0);
    const double b = (delta * delta / 2.0) / a;
    const double c = std::sqrt(delta - b * b);

    // Pre-whitened residual pairs per mode are excitation-independent.
    std::vector<Eigen::VectorXcd> rt1(static_cast<std::size_t>(K / 2 + 1)),
        rt2(static_cast<std::size_t>(K / 2 + 1));
    for (int k = 0; k <= K / 2; ++k) {
        const Eigen::VectorXcd r1 = next.u[static_cast<std::size_t>(k)] -
                                    prev.u[static_cast<std::size_t>(k)] -
                                    delta * prev.w[static_cast<std::size_t>(k)];
        const Eigen::VectorXcd r2 =
            next.w[static_cast<std::size_t>(k)] - prev.w[static_cast<std::size_t>(k)];
        rt1[static_cast<std::size_t>(k)] = r1 / a;
        rt2[static_cast<std::size_t>(k)] = (r2 - (b / a) * r1) / c;
    }

    const ObjectiveFn fn = [&](const Eigen::VectorXd& xi, Eigen::VectorXd& grad) {
        grad = Eigen::VectorXd::Zero(L);
        const Eigen::VectorXd tau = map.tau(xi);
        if (!tau.allFinite() || tau.maxCoeff() > 300.0)
            return std::numeric_limits<double>::infinity();
        LogSpectrum spec(tau, l_max, sigma0);

        double f_val = 0.0;
        Eigen::VectorXd grad_tau = Eigen::VectorXd::Zero(L);
        for (int k = 0; k <= K / 2; ++k) {
            const bool real_mode = (k == 0 || k == K / 2);
            const double w = real_mode ? 0.5 : 1.0;
            Eigen::MatrixXcd d = mode_covariance(k, spec, hyper, order, K);
            if (!d.allFinite()) return std::numeric_limits<double>::infinity();
            if (real_mode) d = d.real().cast<Complex>();
            const HermitianFactor fac(d);
            const auto& x1 = rt1[static_cast<std::size_t>(k)];
            const auto& x2 = rt2[static_cast<std::size_t>(k)];
            f_val += w * (fac.quad_form_floored(x1) + fac.quad_form_floored(x2) +
                          2.0 * fac.log_pdet_floored());
            if (!std::isfinite(f_val)) return std::numeric_limits<double>::infinity();

            const Eigen::VectorXcd a1 = fac.solve_floored(x1);
            const Eigen::VectorXcd a2 = fac.solve_floored(x2);
            const Eigen::MatrixXcd g_d =
                w * (2.0 * fac.inv_floored() - a1 * a1.adjoint() - a2 * a2.adjoint());
            accumulate_mode_covariance_vjp(k, spec, hyper, order, K, g_d, grad_tau);
        }
        f_val += 0.5 * xi.squaredNorm();
        grad = map.adjoint(grad_tau) + xi;
        if (!std::isfinite(f_val)) return std::numeric_limits<double>::infinity();
        return f_val;
    };

    // Moment-matched start: the component-0 residual power estimates D^00 per
    // mode; lifted onto the tau grid it puts the optimizer at the right scale
    // instead of the (often wildly misfit) prior line.
    Eigen::VectorXd tau_init(L);
    {
        std::vector<double> lk, yk;
        for (int k = 1; k <= K / 2; ++k) {
            // Pool every component, each divided by its n = 0 spectral weight.
            double est = 0.0;
            for (int comp = 0; comp <= order; ++comp) {
                const double weight = std::pow(kTwoPi * k, 2.0 * comp);
                est += std::norm(rt1[static_cast<std::size_t>(k)](comp)) / weight;
                est += std::norm(rt2[static_cast<std::size_t>(k)](comp)) / weight;
            }
            est /= 2.0 * (order + 1);
            lk.push_back(std::log(static_cast<double>(k)));
            yk.push_back(0.5 * std::log(std::max(est, 1e-60)));
        }
        const double dl = l_max / (L - 1);
        const double l_nyq = std::log(K / 2.0);
        for (int m = 0; m < L; ++m) {
            const double l = m * dl;
            if (l >= l_nyq) {
                tau_init(m) = yk.back() - 3.0 * (l - l_nyq);
                continue;
            }
            const auto it = std::lower_bound(lk.begin(), lk.end(), l);
            if (it == lk.begin()) {
                tau_init(m) = yk.front();
            } else {
                const std::size_t i1 = static_cast<std::size_t>(it - lk.begin());
                const double t = (l - lk[i1 - 1]) / (lk[i1] - lk[i1 - 1]);
                tau_init(m) = (1.0 - t) * yk[i1 - 1] + t * yk[i1];
            }
        }
    }
    Eigen::VectorXd line(L);
    for (int m = 0; m < L; ++m) line(m) = hyper.offset + hyper.slope * m * (l_max / (L - 1));
    const Eigen::VectorXd xi0 = map.excitations_for(tau_init - line);

    OptimOptions opts = opt_in;
    SpectrumFit out;
    out.telemetry = lbfgs_minimize(fn, xi0, opts);
    out.spectrum = LogSpectrum(map.tau(out.telemetry.x), l_max, sigma0);
    return out;
}

}  // namespace pspde
