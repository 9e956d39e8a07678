#pragma once

// Power spectrum on a log-log grid and the aliased per-mode covariance
// matrices it induces on the spatial grid.
//
// The spectrum is parameterized as sigma(|k|) = exp(tau(log |k|)) with tau
// stored on a regular grid in l = log |k| from 0 to l_max and interpolated
// linearly. The covariance D^k among the field and its first `order` spatial
// derivatives at mode k is the truncated aliased sum
//
//   (D^k)^{cd} = (-1)^d sum_{n=-n_max}^{n_max} (2 pi i (k+nK))^{c+d} sigma^2(|k+nK|),
//
// accumulated from the outermost aliases inward. For k = 0 and the Nyquist
// mode the +-n contributions are combined pairwise so odd-power entries
// cancel exactly.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pspde/errors.hpp"
#include "pspde/fourier.hpp"

namespace pspde {

/// tau values on the regular log-frequency grid l_m = m * l_max / (L-1),
/// plus the standard deviation assigned to the k = 0 coefficient.
struct LogSpectrum {
    Eigen::VectorXd tau;
    double l_max = 0.0;
    double sigma0 = 1.0;

    LogSpectrum() = default;
    LogSpectrum(Eigen::VectorXd tau_values, double lmax, double sigma_zero)
        : tau(std::move(tau_values)), l_max(lmax), sigma0(sigma_zero) {
        if (tau.size() < 2) throw ContractError("LogSpectrum: need at least 2 tau nodes");
        if (l_max <= 0.0) throw ContractError("LogSpectrum: l_max must be positive");
        if (sigma0 <= 0.0) throw ParameterError("LogSpectrum: sigma0 must be positive");
    }

    int size() const { return static_cast<int>(tau.size()); }
    double dl() const { return l_max / (size() - 1); }
    double node(int m) const { return m * dl(); }

    /// Interpolation stencil for tau at frequency magnitude kappa > 0:
    /// nodes (i0, i1) with weights (w0, w1). kappa in (0, 1) clamps to node 0.
    struct Stencil {
        int i0, i1;
        double w0, w1;
    };

    Stencil stencil(double kappa) const {
        const double l = std::log(kappa);
        if (l <= 0.0) return {0, 0, 1.0, 0.0};
        if (l > l_max * (1.0 + 1e-12))
            throw OutOfRangeError("LogSpectrum: frequency " + std::to_string(kappa) +
                                  " exceeds covered range e^l_max = " +
                                  std::to_string(std::exp(l_max)));
        const double t = std::min(l / dl(), static_cast<double>(size() - 1));
        int i0 = static_cast<int>(t);
        if (i0 >= size() - 1) i0 = size() - 2;
        const double w1 = t - i0;
        return {i0, i0 + 1, 1.0 - w1, w1};
    }

    double tau_at(double kappa) const {
        const Stencil s = stencil(kappa);
        return s.w0 * tau(s.i0) + s.w1 * tau(s.i1);
    }

    /// |sigma(kappa)|^2; sigma0^2 at kappa = 0.
    double sigma_sq_at(double kappa) const {
        if (kappa < 0.0) throw ContractError("sigma_sq_at: kappa must be >= 0");
        if (kappa == 0.0) return sigma0 * sigma0;
        return std::exp(2.0 * tau_at(kappa));
    }

    /// Sum of sigma^2 over the resolved integer modes 1 .. K/2.
    double resolved_power(int K) const {
        double total = 0.0;
        for (int k = 1; k <= K / 2; ++k) total += sigma_sq_at(k);
        return total;
    }
};

/// Hyperparameters of the spectrum prior.
struct SpectrumHyper {
    double sigma_tau = 1.0;  // IWP driving amplitude in l
    double offset = 0.0;     // tau at l = 0
    double slope = -3.0;     // initial d tau / d l (power-law index of sigma)
    int n_max = 100;         // aliasing truncation

    void validate() const {
        if (n_max < 1) throw ParameterError("SpectrumHyper: n_max must be >= 1");
        if (sigma_tau < 0.0) throw ParameterError("SpectrumHyper: sigma_tau must be >= 0");
    }
};

/// Grid extent that covers every aliased frequency |k + nK| with |n| <= n_max,
/// including the Nyquist mode's outermost alias at (n_max + 1/2) K.
inline double default_l_max(int K, int n_max) {
    return std::log(static_cast<double>(n_max + 1) * K);
}

/// tau(l) = log(amplitude) + (exponent/2) l, i.e. |sigma|^2 proportional to
/// |k|^exponent with the given amplitude at |k| = 1; sigma0 = amplitude.
inline LogSpectrum power_law_spectrum(double exponent, double amplitude, int L, double l_max) {
    if (amplitude <= 0.0) throw ParameterError("power_law_spectrum: amplitude must be > 0");
    Eigen::VectorXd tau(L);
    const double dl = l_max / (L - 1);
    for (int m = 0; m < L; ++m) tau(m) = std::log(amplitude) + 0.5 * exponent * m * dl;
    return LogSpectrum(std::move(tau), l_max, amplitude);
}

namespace detail {

/// One term of the truncated aliased sum: frequency magnitude and the factor
/// multiplying sigma^2 at that frequency. `combined` terms represent an exact
/// +-pair whose odd powers cancel.
struct AliasTerm {
    double freq;    // signed frequency k + nK (pairs store the positive one)
    bool combined;  // true when this entry stands for both +-freq aliases
    bool zero;      // the k = 0, n = 0 term handled through sigma0
};

/// Enumerate the aliased frequencies of mode k in descending |n| order.
inline std::vector<AliasTerm> alias_terms(int k, int K, int n_max) {
    std::vector<AliasTerm> out;
    out.reserve(static_cast<std::size_t>(2 * n_max + 1));
    if (k == 0) {
        for (int a = n_max; a >= 1; --a)
            out.push_back({static_cast<double>(a) * K, true, false});
        out.push_back({0.0, false, true});
    } else if (k == K / 2) {
        out.push_back({(static_cast<double>(n_max) + 0.5) * K, false, false});
        for (int a = n_max - 1; a >= 0; --a)
            out.push_back({(static_cast<double>(a) + 0.5) * K, true, false});
    } else {
        for (int a = n_max; a >= 1; --a) {
            out.push_back({static_cast<double>(k) + static_cast<double>(a) * K, false, false});
            out.push_back({static_cast<double>(k) - static_cast<double>(a) * K, false, false});
        }
        out.push_back({static_cast<double>(k), false, false});
    }
    return out;
}

inline Complex i_power(int p) {
    switch (p & 3) {
        case 0: return {1.0, 0.0};
        case 1: return {0.0, 1.0};
        case 2: return {-1.0, 0.0};
        default: return {0.0, -1.0};
    }
}

}  // namespace detail

struct ModeCovarianceResult {
    Eigen::MatrixXcd d;
    bool tail_warning = false;  // outermost alias still contributes > 1e-10
};

/// D^k for a single mode; `order` is the highest spatial derivative carried.
inline ModeCovarianceResult mode_covariance_checked(int k, const LogSpectrum& spec,
                                                    const SpectrumHyper& hyper, int order,
                                                    int K) {
    hyper.validate();
    if (k < -K / 2 + 1 || k > K / 2)
        throw ContractError("mode_covariance: mode " + std::to_string(k) + " not in the mode set");
    const int pmax = 2 * order;
    std::vector<double> s(static_cast<std::size_t>(pmax + 1), 0.0);
    double edge_power = 0.0;  // outermost alias contribution to the variance sum

    const auto terms = detail::alias_terms(k, K, hyper.n_max);
    for (std::size_t t = 0; t < terms.size(); ++t) {
        const auto& term = terms[t];
        if (term.zero) {
            s[0] += spec.sigma0 * spec.sigma0;
            continue;
        }
        const double v = spec.sigma_sq_at(std::abs(term.freq));
        double pw = 1.0;
        for (int p = 0; p <= pmax; ++p) {
            double contrib = pw * v;
            if (term.combined) contrib *= (p % 2 == 0) ? 2.0 : 0.0;
            s[static_cast<std::size_t>(p)] += contrib;
            if (p == 0 && t == 0) edge_power = contrib;
            pw *= kTwoPi * term.freq;
        }
    }

    ModeCovarianceResult out;
    out.d.resize(order + 1, order + 1);
    for (int c = 0; c <= order; ++c)
        for (int d = 0; d <= order; ++d) {
            const int p = c + d;
            const double sign = (d % 2 == 0) ? 1.0 : -1.0;
            out.d(c, d) = sign * detail::i_power(p) * s[static_cast<std::size_t>(p)];
        }
    out.tail_warning = s[0] > 0.0 && edge_power > 1e-10 * s[0];
    return out;
}

inline Eigen::MatrixXcd mode_covariance(int k, const LogSpectrum& spec,
                                        const SpectrumHyper& hyper, int order, int K) {
    return mode_covariance_checked(k, spec, hyper, order, K).d;
}

/// Sparse gradient of D^k with respect to the tau nodes: only nodes adjacent
/// to some log|k+nK| carry nonzero blocks.
inline std::vector<std::pair<int, Eigen::MatrixXcd>> mode_covariance_grad(
    int k, const LogSpectrum& spec, const SpectrumHyper& hyper, int order, int K) {
    hyper.validate();
    const int pmax = 2 * order;
    std::map<int, std::vector<double>> node_s;  // node -> dS_p / dtau_node

    const auto terms = detail::alias_terms(k, K, hyper.n_max);
    for (const auto& term : terms) {
        if (term.zero) continue;  // sigma0 is not a tau node
        const double kappa = std::abs(term.freq);
        const double v = spec.sigma_sq_at(kappa);
        const auto st = spec.stencil(kappa);
        for (const auto& [node, weight] :
             {std::pair{st.i0, st.w0}, std::pair{st.i1, st.w1}}) {
            if (weight == 0.0) continue;
            auto& acc = node_s[node];
            if (acc.empty()) acc.assign(static_cast<std::size_t>(pmax + 1), 0.0);
            double pw = 1.0;
            for (int p = 0; p <= pmax; ++p) {
                double contrib = pw * 2.0 * v * weight;
                if (term.combined) contrib *= (p % 2 == 0) ? 2.0 : 0.0;
                acc[static_cast<std::size_t>(p)] += contrib;
                pw *= kTwoPi * term.freq;
            }
        }
    }

    std::vector<std::pair<int, Eigen::MatrixXcd>> out;
    out.reserve(node_s.size());
    for (const auto& [node, s] : node_s) {
        Eigen::MatrixXcd g(order + 1, order + 1);
        for (int c = 0; c <= order; ++c)
            for (int d = 0; d <= order; ++d) {
                const int p = c + d;
                const double sign = (d % 2 == 0) ? 1.0 : -1.0;
                g(c, d) = sign * detail::i_power(p) * s[static_cast<std::size_t>(p)];
            }
        out.emplace_back(node, std::move(g));
    }
    return out;
}

/// Accumulate d/dtau_m of Re<G, D^k> into `grad`, for a fixed Hermitian
/// weight matrix G. Same alias walk as mode_covariance, contracted against G;
/// this is the workhorse of the adaptive-spectrum objective gradient.
inline void accumulate_mode_covariance_vjp(int k, const LogSpectrum& spec,
                                           const SpectrumHyper& hyper, int order, int K,
                                           const Eigen::MatrixXcd& g_weight,
                                           Eigen::VectorXd& grad) {
    const int pmax = 2 * order;
    // A_p = i^p * sum_{c+d=p} (-1)^d conj(G^{cd})
    std::vector<Complex> a(static_cast<std::size_t>(pmax + 1), Complex(0.0, 0.0));
    for (int c = 0; c <= order; ++c)
        for (int d = 0; d <= order; ++d) {
            const double sign = (d % 2 == 0) ? 1.0 : -1.0;
            a[static_cast<std::size_t>(c + d)] +=
                sign * std::conj(g_weight(c, d)) * detail::i_power(c + d);
        }

    const auto terms = detail::alias_terms(k, K, hyper.n_max);
    for (const auto& term : terms) {
        if (term.zero) continue;
        const double kappa = std::abs(term.freq);
        const double v = spec.sigma_sq_at(kappa);
        double q = 0.0;
        double pw = 1.0;
        for (int p = 0; p <= pmax; ++p) {
            double factor = pw;
            if (term.combined) factor *= (p % 2 == 0) ? 2.0 : 0.0;
            q += factor * a[static_cast<std::size_t>(p)].real();
            pw *= kTwoPi * term.freq;
        }
        const auto st = spec.stencil(kappa);
        grad(st.i0) += q * 2.0 * v * st.w0;
        grad(st.i1) += q * 2.0 * v * st.w1;
    }
}

/// Covariance stack over the stored half-spectrum (k = 0 .. K/2); negative
/// modes are conjugates.
struct ModeCovarianceStack {
    int K = 0;
    int order = 0;
    std::vector<Eigen::MatrixXcd> d;  // indexed by k
    bool tail_warning = false;
    int tail_warning_mode = 0;

    const Eigen::MatrixXcd& at(int k) const { return d[static_cast<std::size_t>(k)]; }
};

inline ModeCovarianceStack build_mode_covariances(int K, int order, const LogSpectrum& spec,
                                                  const SpectrumHyper& hyper) {
    ModeCovarianceStack stack;
    stack.K = K;
    stack.order = order;
    stack.d.reserve(static_cast<std::size_t>(K / 2 + 1));
    for (int k = 0; k <= K / 2; ++k) {
        auto r = mode_covariance_checked(k, spec, hyper, order, K);
        if (r.tail_warning && !stack.tail_warning) {
            stack.tail_warning = true;
            stack.tail_warning_mode = k;
        }
        stack.d.push_back(std::move(r.d));
    }
    return stack;
}

// ---------------------------------------------------------------------------
// Excitation parameterization of tau.
//
// tau = offset + slope * l + M xi with xi standard normal of length L, where
// M is the lower-triangular Cholesky factor of the node covariance
//
//   Sigma = Sigma_IWP + sigma_level^2 1 1^T + sigma_tilt^2 l l^T ,
//
// Sigma_IWP being the exact position covariance of the integrated Wiener
// process pinned to zero value and slope at l = 0. The two rank-one terms
// give the realized field a free overall level and tilt (scaled so they
// vanish together with sigma_tau); without them tau(0) could never move,
// which would freeze the spectrum's amplitude across time steps.
// ---------------------------------------------------------------------------

class TauExcitationMap {
  public:
    TauExcitationMap(int L, double l_max, const SpectrumHyper& hyper)
        : L_(L), l_max_(l_max), hyper_(hyper) {
        hyper.validate();
        if (L < 2) throw ContractError("TauExcitationMap: need at least 2 nodes");
        m_ = Eigen::MatrixXd::Zero(L, L);
        if (hyper.sigma_tau == 0.0) return;

        const double dl = l_max / (L - 1);
        const double st2 = hyper.sigma_tau * hyper.sigma_tau;
        const double level_var = st2 * l_max * l_max * l_max / 3.0;
        const double tilt_var = st2 * l_max;
        Eigen::MatrixXd sigma(L, L);
        for (int a = 0; a < L; ++a) {
            for (int b = 0; b < L; ++b) {
                const double la = a * dl, lb = b * dl;
                const double mn = std::min(la, lb);
                sigma(a, b) = st2 * (mn * mn * mn / 3.0 + std::abs(la - lb) * mn * mn / 2.0) +
                              level_var + tilt_var * la * lb;
            }
        }
        Eigen::LLT<Eigen::MatrixXd> llt(sigma);
        if (llt.info() != Eigen::Success) {
            // Fall back with a relative jitter; Sigma is PD in exact arithmetic.
            sigma.diagonal().array() += 1e-12 * sigma.diagonal().maxCoeff();
            llt.compute(sigma);
            if (llt.info() != Eigen::Success)
                throw NumericalError("TauExcitationMap: Cholesky factorization failed");
        }
        m_ = llt.matrixL();
    }

    int dim() const { return L_; }
    double l_max() const { return l_max_; }

    /// Deviation field M xi (zero mean part only).
    Eigen::VectorXd deviations(const Eigen::VectorXd& xi) const {
        if (xi.size() != L_)
            throw DimensionError("TauExcitationMap: expected " + std::to_string(L_) +
                                 " excitations, got " + std::to_string(xi.size()));
        return m_ * xi;
    }

    /// Full field offset + slope * l + M xi.
    Eigen::VectorXd tau(const Eigen::VectorXd& xi) const {
        Eigen::VectorXd out = deviations(xi);
        const double dl = l_max_ / (L_ - 1);
        for (int m = 0; m < L_; ++m) out(m) += hyper_.offset + hyper_.slope * m * dl;
        return out;
    }

    /// M^T g, the adjoint of `deviations`.
    Eigen::VectorXd adjoint(const Eigen::VectorXd& grad_tau) const {
        if (grad_tau.size() != L_)
            throw DimensionError("TauExcitationMap::adjoint: size mismatch");
        return m_.transpose() * grad_tau;
    }

    /// Excitations realizing the given deviation field (triangular solve);
    /// zero when the map is degenerate (sigma_tau = 0).
    Eigen::VectorXd excitations_for(const Eigen::VectorXd& deviations) const {
        if (deviations.size() != L_)
            throw DimensionError("TauExcitationMap::excitations_for: size mismatch");
        if (hyper_.sigma_tau == 0.0) return Eigen::VectorXd::Zero(L_);
        return m_.triangularView<Eigen::Lower>().solve(deviations);
    }

  private:
    int L_;
    double l_max_;
    SpectrumHyper hyper_;
    Eigen::MatrixXd m_;
};

/// Realize tau from standard-normal excitations on an L-node grid.
inline Eigen::VectorXd tau_from_excitations(const Eigen::VectorXd& xi,
                                            const SpectrumHyper& hyper, double l_max) {
    TauExcitationMap map(static_cast<int>(xi.size()), l_max, hyper);
    return map.tau(xi);
}

/// Discrete-time Wiener update tau^i = tau^{i-1} + delta * tau_tilde.
inline Eigen::VectorXd temporal_update(const Eigen::VectorXd& tau_prev, double delta,
                                       const Eigen::VectorXd& tau_tilde) {
    if (tau_prev.size() != tau_tilde.size())
        throw DimensionError("temporal_update: tau grids do not match");
    return tau_prev + delta * tau_tilde;
}

}  // namespace pspde
