#pragma once

// Discrete space-time Markov prior per Fourier mode: once-integrated Wiener
// transitions of the stacked (field, derivatives) vector, the predictive and
// likelihood factors they induce for one simulation step, the conditional of
// the auxiliary time-derivative components, and the generative predictive
// sampler with spectral truncation.
//
// Conventions for the stored half-spectrum: interior modes 0 < k < K/2 are
// circularly-symmetric complex Gaussians with E[z z^dagger] = D^k; the k = 0
// and Nyquist modes are real with covariance Re(D^k) at full variance.

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "pspde/errors.hpp"
#include "pspde/fourier.hpp"
#include "pspde/gaussian.hpp"
#include "pspde/pde.hpp"
#include "pspde/rng.hpp"
#include "pspde/spectrum.hpp"

namespace pspde {

/// State of one Fourier mode: u holds components c = 0..o (field value and
/// spatial derivatives), v holds the time derivatives of components c = 1..o.
/// The component c = 0 of the time derivative is determined by the PDE and is
/// not stored.
struct ModeState {
    Eigen::VectorXcd u;
    Eigen::VectorXcd v;
};

/// Full simulation state at one time: all half-spectrum modes, the current
/// log-spectrum, and the seed lineage for reproducible sampling.
struct SimState {
    double time = 0.0;
    int K = 0;
    int order = 0;
    std::vector<ModeState> modes;  // indexed by k = 0..K/2
    LogSpectrum spectrum;
    std::uint64_t seed = 0;
    std::uint64_t step_index = 0;

    const ModeState& mode(int k) const { return modes[static_cast<std::size_t>(k)]; }
    ModeState& mode(int k) { return modes[static_cast<std::size_t>(k)]; }

    void check_consistent() const {
        if (static_cast<int>(modes.size()) != K / 2 + 1)
            throw DimensionError("SimState: mode count does not match K");
        for (const auto& m : modes) {
            if (static_cast<int>(m.u.size()) != order + 1 ||
                static_cast<int>(m.v.size()) != order)
                throw DimensionError("SimState: mode vector sizes do not match order");
        }
    }

    /// Per-mode u view consumed by g_eval and the optimizer.
    ModeVectors u_vectors() const {
        ModeVectors out(modes.size());
        for (std::size_t i = 0; i < modes.size(); ++i) out[i] = modes[i].u;
        return out;
    }

    /// Grid values of the field component c = 0.
    std::vector<double> field_values() const {
        FourierField f(K);
        for (int k = 0; k <= K / 2; ++k) f.set(k, mode(k).u(0));
        return dft_synthesize(f, SpatialGrid(K));
    }
};

/// Stacked time-derivative vector (g_prev; v_prev) used as the drift of u.
inline Eigen::VectorXcd stacked_w(const ModeState& prev, Complex g_prev) {
    Eigen::VectorXcd w(prev.u.size());
    w(0) = g_prev;
    for (int c = 1; c < w.size(); ++c) w(c) = prev.v(c - 1);
    return w;
}

/// Joint Gaussian of (u^i, udot^i) given the previous pair: drift
/// [[1, delta], [0, 1]] applied blockwise, covariance
/// [[delta^3/3, delta^2/2], [delta^2/2, delta]] (x) D.
inline GaussianBlock transition_joint(const Eigen::VectorXcd& u_prev,
                                      const Eigen::VectorXcd& w_prev, double delta,
                                      const Eigen::MatrixXcd& d) {
    if (delta <= 0.0) throw ContractError("transition_joint: delta must be positive");
    const int n = static_cast<int>(u_prev.size());
    if (w_prev.size() != n || d.rows() != n || d.cols() != n)
        throw DimensionError("transition_joint: dimension mismatch");

    GaussianBlock out;
    out.mean.resize(2 * n);
    out.mean.head(n) = u_prev + delta * w_prev;
    out.mean.tail(n) = w_prev;

    out.cov.resize(2 * n, 2 * n);
    const double d3 = delta * delta * delta / 3.0;
    const double d2 = delta * delta / 2.0;
    out.cov.topLeftCorner(n, n) = d3 * d;
    out.cov.topRightCorner(n, n) = d2 * d;
    out.cov.bottomLeftCorner(n, n) = d2 * d;
    out.cov.bottomRightCorner(n, n) = delta * d;
    return out;
}

/// Predictive prior of u^i given the previous mode state and its PDE drift:
/// mean u^{i-1} + delta (g_prev; v^{i-1}), covariance (delta^3/3) D.
inline GaussianBlock predictive_u(const ModeState& prev, Complex g_prev, double delta,
                                  const Eigen::MatrixXcd& d) {
    if (delta <= 0.0) throw ContractError("predictive_u: delta must be positive");
    GaussianBlock out;
    out.mean = prev.u + delta * stacked_w(prev, g_prev);
    out.cov = (delta * delta * delta / 3.0) * d;
    return out;
}

/// Scalar Gaussian over the constrained time derivative udot^(0),i given u^i
/// and the previous state. The D-independent gain 3/(2 delta) and the
/// variance (delta/4) D^{00} follow from Schur-conditioning the joint; the
/// test suite checks this identity against generic conditioning.
struct ScalarGaussian {
    Complex mean;
    double variance;
};

inline ScalarGaussian likelihood_params(const ModeState& prev, const Eigen::VectorXcd& u_i,
                                        Complex g_prev, double delta,
                                        const Eigen::MatrixXcd& d) {
    if (delta <= 0.0) throw ContractError("likelihood_params: delta must be positive");
    if (u_i.size() != prev.u.size())
        throw DimensionError("likelihood_params: state dimension mismatch");
    ScalarGaussian out;
    out.mean = g_prev + (3.0 / (2.0 * delta)) * (u_i(0) - prev.u(0) - delta * g_prev);
    out.variance = (delta / 4.0) * d(0, 0).real();
    return out;
}

/// Conditional of v^i = (udot^(1),i .. udot^(o),i) given u^i, the PDE value
/// g_i at the new state, and the previous state. Degenerate D^{00} leaves the
/// marginal untouched (no information flows through a zero-variance pivot).
inline GaussianBlock conditional_v(const ModeState& prev, const Eigen::VectorXcd& u_i,
                                   Complex g_i, Complex g_prev, double delta,
                                   const Eigen::MatrixXcd& d) {
    if (delta <= 0.0) throw ContractError("conditional_v: delta must be positive");
    const int n = static_cast<int>(prev.u.size());
    const int o = n - 1;
    if (u_i.size() != n) throw DimensionError("conditional_v: state dimension mismatch");

    // (udot | u, previous): mean w_prev + 3/(2 delta) (u - mean_pred), cov (delta/4) D.
    const Eigen::VectorXcd w_prev = stacked_w(prev, g_prev);
    const Eigen::VectorXcd mean_pred = prev.u + delta * w_prev;
    const Eigen::VectorXcd m_w = w_prev + (3.0 / (2.0 * delta)) * (u_i - mean_pred);
    const Eigen::MatrixXcd c_w = (delta / 4.0) * d;

    GaussianBlock out;
    out.mean.resize(o);
    out.cov.resize(o, o);
    const double pivot = c_w(0, 0).real();
    const double cutoff = 1e-12 * std::abs(c_w.real().trace());
    if (pivot > cutoff && pivot > 0.0) {
        const Eigen::VectorXcd gain = c_w.block(1, 0, o, 1) / pivot;
        out.mean = m_w.tail(o) + gain * (g_i - m_w(0));
        out.cov = c_w.block(1, 1, o, o) - gain * c_w.block(0, 1, 1, o);
    } else {
        out.mean = m_w.tail(o);
        out.cov = c_w.block(1, 1, o, o);
    }
    out.cov = ((out.cov + out.cov.adjoint()) / 2.0).eval();
    return out;
}

/// One draw of the generative predictive step
///   u^i = u^{i-1} + delta (g(u^{i-1}); v^{i-1}) + sqrt(delta^3/3) U Lambda^{1/2} r
/// with r supplied per mode at the retained rank of the truncated factor of
/// D^k. The k = 0 and Nyquist excitations must be real; Hermitian pairing of
/// the result is structural.
inline ModeVectors generative_step(const SimState& prev, const PdeModel& pde, double delta,
                                   const std::vector<Eigen::VectorXcd>& excitations,
                                   double trunc_threshold,
                                   const ModeCovarianceStack& stack) {
    prev.check_consistent();
    if (static_cast<int>(excitations.size()) != prev.K / 2 + 1)
        throw DimensionError("generative_step: need one excitation vector per stored mode");

    const SpatialGrid grid(prev.K);
    const FourierField g_prev = g_eval(prev.u_vectors(), pde, grid);
    const double amp = std::sqrt(delta * delta * delta / 3.0);

    ModeVectors out(static_cast<std::size_t>(prev.K / 2 + 1));
    for (int k = 0; k <= prev.K / 2; ++k) {
        const bool real_mode = (k == 0 || k == prev.K / 2);
        Eigen::MatrixXcd d = stack.at(k);
        if (real_mode) d = d.real().cast<Complex>();
        const TruncatedFactor f = eig_truncate(d, trunc_threshold);
        const auto& r = excitations[static_cast<std::size_t>(k)];
        if (r.size() != f.rank)
            throw DimensionError("generative_step: excitation rank mismatch at mode " +
                                 std::to_string(k) + " (want " + std::to_string(f.rank) + ")");
        Eigen::VectorXcd noise = Eigen::VectorXcd::Zero(prev.order + 1);
        for (int j = 0; j < f.rank; ++j)
            noise += f.u.col(j) * (std::sqrt(f.lambda(j)) * r(j));
        const ModeState& m = prev.mode(k);
        out[static_cast<std::size_t>(k)] =
            m.u + delta * stacked_w(m, g_prev.at(k)) + amp * noise;
        if (real_mode)
            for (int c = 0; c <= prev.order; ++c)
                out[static_cast<std::size_t>(k)](c) =
                    Complex(out[static_cast<std::size_t>(k)](c).real(), 0.0);
    }
    return out;
}

/// Draw the excitation vectors for generative_step from a named stream.
inline std::vector<Eigen::VectorXcd> draw_generative_excitations(
    const SimState& prev, double trunc_threshold, const ModeCovarianceStack& stack,
    std::uint64_t seed, std::uint64_t step) {
    std::vector<Eigen::VectorXcd> out(static_cast<std::size_t>(prev.K / 2 + 1));
    const double inv_sqrt2 = 0.70710678118654752440;
    for (int k = 0; k <= prev.K / 2; ++k) {
        const bool real_mode = (k == 0 || k == prev.K / 2);
        Eigen::MatrixXcd d = stack.at(k);
        if (real_mode) d = d.real().cast<Complex>();
        const TruncatedFactor f = eig_truncate(d, trunc_threshold);
        RngStream rng(seed, step, "generative", static_cast<std::uint64_t>(k));
        Eigen::VectorXcd r(f.rank);
        for (int j = 0; j < f.rank; ++j) {
            if (real_mode)
                r(j) = Complex(rng.next_normal(), 0.0);
            else
                r(j) = Complex(rng.next_normal(), rng.next_normal()) * inv_sqrt2;
        }
        out[static_cast<std::size_t>(k)] = std::move(r);
    }
    return out;
}

}  // namespace pspde
