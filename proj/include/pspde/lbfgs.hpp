#pragma once

// Limited-memory quasi-Newton minimizer with a strong-Wolfe line search.
// Works on plain real coordinate vectors; callers provide a fused
// value-and-gradient callback.

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>

#include "pspde/errors.hpp"

namespace pspde {

using ObjectiveFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct OptimOptions {
    int max_iters = 500;
    double gtol = 1e-9;            // grad inf-norm <= gtol * max(1, |f|)
    double f_stagnation = 1e-13;   // relative objective-decrease guard
    int memory = 12;
    double wolfe_c1 = 1e-4;
    double wolfe_c2 = 0.9;
};

struct OptimResult {
    Eigen::VectorXd x;
    double value = 0.0;
    double grad_norm = 0.0;  // inf norm
    int iterations = 0;
    bool converged = false;
};

namespace detail {

/// Strong-Wolfe line search (bracket and zoom). Returns the accepted step or
/// 0 when no acceptable step was found.
inline double wolfe_line_search(const ObjectiveFn& fg, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& dir, double f0, double dphi0,
                                double c1, double c2, Eigen::VectorXd& x_out, double& f_out,
                                Eigen::VectorXd& g_out) {
    const int max_evals = 40;
    double alpha_prev = 0.0, f_prev = f0;
    double alpha = 1.0;
    double alpha_lo = 0.0, alpha_hi = 0.0, f_lo = f0;
    bool bracketed = false;
    Eigen::VectorXd g(x.size());

    auto eval = [&](double a, double& f) {
        x_out = x + a * dir;
        f = fg(x_out, g);
        return g.dot(dir);
    };

    int evals = 0;
    for (; evals < max_evals && !bracketed; ++evals) {
        double f_a;
        const double dphi = eval(alpha, f_a);
        if (!std::isfinite(f_a)) {
            alpha *= 0.25;
            continue;
        }
        if (f_a > f0 + c1 * alpha * dphi0 || (evals > 0 && f_a >= f_prev)) {
            alpha_lo = alpha_prev;
            alpha_hi = alpha;
            bracketed = true;
            break;
        }
        if (std::abs(dphi) <= -c2 * dphi0) {
            f_out = f_a;
            g_out = g;
            return alpha;
        }
        if (dphi >= 0.0) {
            alpha_lo = alpha;
            alpha_hi = alpha_prev;
            f_lo = f_a;
            bracketed = true;
            break;
        }
        alpha_prev = alpha;
        f_prev = f_a;
        f_lo = f_a;
        alpha *= 2.0;
    }
    if (!bracketed) return 0.0;

    for (; evals < max_evals; ++evals) {
        const double a = 0.5 * (alpha_lo + alpha_hi);
        double f_a;
        const double dphi = eval(a, f_a);
        if (!std::isfinite(f_a) || f_a > f0 + c1 * a * dphi0 || f_a >= f_lo) {
            alpha_hi = a;
            continue;
        }
        if (std::abs(dphi) <= -c2 * dphi0) {
            f_out = f_a;
            g_out = g;
            return a;
        }
        if (dphi * (alpha_hi - alpha_lo) >= 0.0) alpha_hi = alpha_lo;
        alpha_lo = a;
        f_lo = f_a;
        if (std::abs(alpha_hi - alpha_lo) < 1e-16) break;
    }
    // Fall back to the best bracketed point if it at least decreases f.
    if (f_lo < f0 && alpha_lo > 0.0) {
        double f_a;
        eval(alpha_lo, f_a);
        f_out = f_a;
        g_out = g;
        return alpha_lo;
    }
    return 0.0;
}

}  // namespace detail

inline OptimResult lbfgs_minimize(const ObjectiveFn& fg, Eigen::VectorXd x0,
                                  const OptimOptions& opts = {}) {
    const int n = static_cast<int>(x0.size());
    OptimResult res;
    res.x = std::move(x0);

    Eigen::VectorXd grad(n);
    double f = fg(res.x, grad);
    if (!std::isfinite(f)) throw NumericalError("lbfgs: objective not finite at the start");

    std::deque<Eigen::VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;

    Eigen::VectorXd x_new(n), g_new(n);
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        res.grad_norm = grad.lpNorm<Eigen::Infinity>();
        res.value = f;
        res.iterations = iter;
        if (res.grad_norm <= opts.gtol * std::max(1.0, std::abs(f))) {
            res.converged = true;
            return res;
        }

        // Two-loop recursion.
        Eigen::VectorXd q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[static_cast<std::size_t>(i)] =
                rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
            q -= alpha[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
        }
        if (!s_hist.empty()) {
            const auto& s = s_hist.back();
            const auto& y = y_hist.back();
            q *= s.dot(y) / y.dot(y);
        }
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(q);
            q += (alpha[i] - beta) * s_hist[i];
        }
        Eigen::VectorXd dir = -q;

        double dphi0 = grad.dot(dir);
        if (dphi0 >= 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -grad;
            dphi0 = grad.dot(dir);
            if (dphi0 >= 0.0) break;  // zero gradient handled above
        }

        double f_new = f;
        const double step = detail::wolfe_line_search(fg, res.x, dir, f, dphi0, opts.wolfe_c1,
                                                      opts.wolfe_c2, x_new, f_new, g_new);
        if (step == 0.0) {
            // No acceptable step exists at this precision. After at least one
            // successful iteration that is exhaustion, not failure.
            res.converged = iter > 0;
            return res;
        }

        const Eigen::VectorXd s = x_new - res.x;
        const Eigen::VectorXd y = g_new - grad;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }

        const double decrease = f - f_new;
        res.x = x_new;
        grad = g_new;
        f = f_new;
        if (decrease <= opts.f_stagnation * std::max(1.0, std::abs(f))) {
            // No meaningful progress left at this precision; treat as converged.
            res.value = f;
            res.grad_norm = grad.lpNorm<Eigen::Infinity>();
            res.converged = true;
            return res;
        }
    }

    res.value = f;
    res.grad_norm = grad.lpNorm<Eigen::Infinity>();
    res.converged = res.grad_norm <= opts.gtol * std::max(1.0, std::abs(f));
    return res;
}

}  // namespace pspde
