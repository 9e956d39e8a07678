#pragma once

// PDE right-hand sides of the form ds/dt = f(s, s^(1), ..., s^(o)) evaluated
// pointwise on the grid, their spectral lift g = analyze . f . synthesize,
// and the adjoint Jacobian action used by the step optimizer.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pspde/errors.hpp"
#include "pspde/fourier.hpp"

namespace pspde {

/// Per-mode state vectors (components c = 0..o) over the stored half-spectrum.
using ModeVectors = std::vector<Eigen::VectorXcd>;

struct PdeModel {
    int order = 0;
    std::string name;
    /// f evaluated at one grid point; argument packs (s, s^(1), ..., s^(o)).
    std::function<double(std::span<const double>)> rhs;
    /// Pointwise partial derivative of f with respect to s^(c).
    std::function<double(std::span<const double>, int)> partial;
    /// Set when f is linear with mode-diagonal spectral action
    /// g_k = sum_c linear_coeffs[c] * u^(c)_k.
    bool linear = false;
    Eigen::VectorXd linear_coeffs;
    std::map<std::string, double> params;
};

inline PdeModel make_diffusion(double nu) {
    if (nu <= 0.0) throw ParameterError("make_diffusion: nu must be positive");
    PdeModel m;
    m.order = 2;
    m.name = "diffusion";
    m.rhs = [nu](std::span<const double> s) { return nu * s[2]; };
    m.partial = [nu](std::span<const double>, int c) { return c == 2 ? nu : 0.0; };
    m.linear = true;
    m.linear_coeffs = Eigen::Vector3d(0.0, 0.0, nu);
    m.params["nu"] = nu;
    return m;
}

inline PdeModel make_burgers(double nu) {
    if (nu <= 0.0) throw ParameterError("make_burgers: nu must be positive");
    PdeModel m;
    m.order = 2;
    m.name = "burgers";
    m.rhs = [nu](std::span<const double> s) { return -s[0] * s[1] + nu * s[2]; };
    m.partial = [nu](std::span<const double> s, int c) {
        if (c == 0) return -s[1];
        if (c == 1) return -s[0];
        return nu;
    };
    m.params["nu"] = nu;
    return m;
}

inline PdeModel make_pde(const std::string& name, double nu) {
    if (name == "diffusion") return make_diffusion(nu);
    if (name == "burgers") return make_burgers(nu);
    throw ParameterError("make_pde: unknown PDE '" + name + "'");
}

namespace detail {

inline void check_order(const ModeVectors& u, const PdeModel& pde, const SpatialGrid& grid) {
    if (static_cast<int>(u.size()) != grid.K / 2 + 1)
        throw DimensionError("g_eval: expected half-spectrum of " +
                             std::to_string(grid.K / 2 + 1) + " modes");
    for (const auto& uk : u)
        if (static_cast<int>(uk.size()) != pde.order + 1)
            throw DimensionError("g_eval: mode vector length does not match PDE order " +
                                 std::to_string(pde.order));
}

inline FourierField component_field(const ModeVectors& u, int c, int K) {
    FourierField f(K);
    for (int k = 0; k <= K / 2; ++k) f.set(k, u[static_cast<std::size_t>(k)](c));
    return f;
}

}  // namespace detail

struct GEvalResult {
    FourierField g;
    std::vector<std::vector<double>> fields;  // synthesized s^(c), c = 0..o
    std::vector<double> rhs_values;
};

/// g(u) = analyze(f(synthesize u^(0), ..., synthesize u^(o))) together with
/// the synthesized fields (reused by the adjoint).
inline GEvalResult g_eval_full(const ModeVectors& u, const PdeModel& pde,
                               const SpatialGrid& grid) {
    detail::check_order(u, pde, grid);
    const int K = grid.K;
    GEvalResult out;
    out.fields.resize(static_cast<std::size_t>(pde.order + 1));
    for (int c = 0; c <= pde.order; ++c)
        out.fields[static_cast<std::size_t>(c)] =
            dft_synthesize(detail::component_field(u, c, K), grid);

    out.rhs_values.resize(static_cast<std::size_t>(K));
    std::vector<double> point(static_cast<std::size_t>(pde.order + 1));
    for (int j = 0; j < K; ++j) {
        for (int c = 0; c <= pde.order; ++c)
            point[static_cast<std::size_t>(c)] = out.fields[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
        out.rhs_values[static_cast<std::size_t>(j)] = pde.rhs(point);
    }
    out.g = dft_analyze(out.rhs_values, grid);
    return out;
}

inline FourierField g_eval(const ModeVectors& u, const PdeModel& pde, const SpatialGrid& grid) {
    return g_eval_full(u, pde, grid).g;
}

/// Adjoint Jacobian action of g. The cotangent holds, per stored mode k, the
/// complex gradient d phi / d Re(g_k) + i d phi / d Im(g_k) of some scalar
/// phi; the return value holds the corresponding complex gradient of phi with
/// respect to each stored u^(c)_k.
inline ModeVectors g_vjp(const ModeVectors& u, const FourierField& cotangent,
                         const PdeModel& pde, const SpatialGrid& grid) {
    detail::check_order(u, pde, grid);
    const int K = grid.K;
    if (cotangent.grid_size() != K) throw DimensionError("g_vjp: cotangent grid mismatch");

    const GEvalResult ev = g_eval_full(u, pde, grid);

    // Back through the analysis: d phi / d w_j = (1/K) Re(sum_k lam_k e^{i theta}),
    // computed as a synthesis with halved interior coefficients.
    FourierField halved(K);
    halved.set(0, cotangent.at(0));
    halved.set(K / 2, cotangent.at(K / 2));
    for (int k = 1; k < K / 2; ++k) halved.set(k, cotangent.at(k) * 0.5);
    std::vector<double> d = dft_synthesize(halved, grid);
    for (double& x : d) x /= K;

    // Back through the pointwise map and each synthesis.
    ModeVectors grad(static_cast<std::size_t>(K / 2 + 1),
                     Eigen::VectorXcd::Zero(pde.order + 1));
    std::vector<double> point(static_cast<std::size_t>(pde.order + 1));
    std::vector<double> e(static_cast<std::size_t>(K));
    for (int c = 0; c <= pde.order; ++c) {
        for (int j = 0; j < K; ++j) {
            for (int cc = 0; cc <= pde.order; ++cc)
                point[static_cast<std::size_t>(cc)] =
                    ev.fields[static_cast<std::size_t>(cc)][static_cast<std::size_t>(j)];
            e[static_cast<std::size_t>(j)] = d[static_cast<std::size_t>(j)] * pde.partial(point, c);
        }
        const FourierField ae = dft_analyze(e, grid);
        for (int k = 0; k <= K / 2; ++k) {
            const double scale = (k == 0 || k == K / 2) ? K : 2.0 * K;
            grad[static_cast<std::size_t>(k)](c) = scale * ae.at(k);
        }
    }
    return grad;
}

}  // namespace pspde
