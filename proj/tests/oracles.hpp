#pragma once

// Independent reference implementations used only by the test suites.
// These deliberately avoid the library's production code paths: direct
// O(K^2) transform sums, plain dense linear algebra for conditioning, and
// finite differences for gradients.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <functional>
#include <vector>

namespace oracle {

using Complex = std::complex<double>;
constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Direct synthesis sum s_j = sum_k c_k e^{2 pi i k j / K} over the full
/// ascending spectrum (k from -K/2+1 to K/2).
inline std::vector<Complex> direct_synthesize(const std::vector<Complex>& full, int K) {
    std::vector<Complex> out(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j) {
        Complex acc(0.0, 0.0);
        for (int p = 0; p < K; ++p) {
            const int k = p - K / 2 + 1;
            const double ang = kTwoPi * k * j / static_cast<double>(K);
            acc += full[static_cast<std::size_t>(p)] * Complex(std::cos(ang), std::sin(ang));
        }
        out[static_cast<std::size_t>(j)] = acc;
    }
    return out;
}

/// Direct analysis sum c_k = (1/K) sum_j v_j e^{-2 pi i k j / K}, ascending order.
inline std::vector<Complex> direct_analyze(const std::vector<double>& values, int K) {
    std::vector<Complex> out(static_cast<std::size_t>(K));
    for (int p = 0; p < K; ++p) {
        const int k = p - K / 2 + 1;
        Complex acc(0.0, 0.0);
        for (int j = 0; j < K; ++j) {
            const double ang = -kTwoPi * k * j / static_cast<double>(K);
            acc += values[static_cast<std::size_t>(j)] * Complex(std::cos(ang), std::sin(ang));
        }
        out[static_cast<std::size_t>(p)] = acc / static_cast<double>(K);
    }
    return out;
}

/// Brute-force aliased mode covariance:
///   (D^k)^{cd} = (-1)^d sum_{n=-n_max}^{n_max} (2 pi i (k+nK))^{c+d} var(|k+nK|)
/// with `var` supplied by the caller.
inline Eigen::MatrixXcd brute_force_mode_covariance(
    int k, int K, int order, int n_max, const std::function<double(double)>& var) {
    const int dim = order + 1;
    Eigen::MatrixXcd d = Eigen::MatrixXcd::Zero(dim, dim);
    for (int n = -n_max; n <= n_max; ++n) {
        const double freq = static_cast<double>(k) + static_cast<double>(n) * K;
        const double v = var(std::abs(freq));
        const Complex base(0.0, kTwoPi * freq);
        for (int c = 0; c < dim; ++c) {
            for (int e = 0; e < dim; ++e) {
                Complex pw(1.0, 0.0);
                for (int p = 0; p < c + e; ++p) pw *= base;
                const double sign = (e % 2 == 0) ? 1.0 : -1.0;
                d(c, e) += sign * pw * v;
            }
        }
    }
    return d;
}

/// Plain dense Gaussian conditioning with an ordinary LU inverse: condition
/// the joint (mean, cov) on block `obs` (index set) taking the given values.
struct DenseConditional {
    Eigen::VectorXcd mean;
    Eigen::MatrixXcd cov;
};

inline DenseConditional dense_condition(const Eigen::VectorXcd& mean,
                                        const Eigen::MatrixXcd& cov,
                                        const std::vector<int>& obs,
                                        const Eigen::VectorXcd& values) {
    const int n = static_cast<int>(mean.size());
    std::vector<int> keep;
    std::vector<bool> is_obs(static_cast<std::size_t>(n), false);
    for (int i : obs) is_obs[static_cast<std::size_t>(i)] = true;
    for (int i = 0; i < n; ++i)
        if (!is_obs[static_cast<std::size_t>(i)]) keep.push_back(i);

    const int nk = static_cast<int>(keep.size());
    const int no = static_cast<int>(obs.size());
    Eigen::VectorXcd mu_k(nk), mu_o(no);
    Eigen::MatrixXcd s_kk(nk, nk), s_ko(nk, no), s_oo(no, no);
    for (int a = 0; a < nk; ++a) {
        mu_k(a) = mean(keep[static_cast<std::size_t>(a)]);
        for (int b = 0; b < nk; ++b)
            s_kk(a, b) = cov(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
        for (int b = 0; b < no; ++b)
            s_ko(a, b) = cov(keep[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);
    }
    for (int a = 0; a < no; ++a) {
        mu_o(a) = mean(obs[static_cast<std::size_t>(a)]);
        for (int b = 0; b < no; ++b)
            s_oo(a, b) = cov(obs[static_cast<std::size_t>(a)], obs[static_cast<std::size_t>(b)]);
    }
    const Eigen::MatrixXcd s_oo_inv = s_oo.fullPivLu().inverse();
    DenseConditional out;
    out.mean = mu_k + s_ko * s_oo_inv * (values - mu_o);
    out.cov = s_kk - s_ko * s_oo_inv * s_ko.adjoint();
    return out;
}

/// Central finite difference of a scalar function along coordinate i.
inline double central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                 const Eigen::VectorXd& x, int i, double eps) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += eps;
    xm(i) -= eps;
    return (f(xp) - f(xm)) / (2.0 * eps);
}

/// Exact covariance of integrated-Wiener-process positions on a regular grid
/// l_m = m * dl with the process pinned to zero position and slope at l = 0:
///   cov(l_a, l_b) = sigma^2 (min^3/3 + |l_a - l_b| min^2 / 2).
inline Eigen::MatrixXd iwp_position_covariance(int L, double dl, double sigma) {
    Eigen::MatrixXd c(L, L);
    for (int a = 0; a < L; ++a) {
        for (int b = 0; b < L; ++b) {
            const double la = a * dl, lb = b * dl;
            const double mn = std::min(la, lb);
            c(a, b) = sigma * sigma * (mn * mn * mn / 3.0 + std::abs(la - lb) * mn * mn / 2.0);
        }
    }
    return c;
}

}  // namespace oracle
