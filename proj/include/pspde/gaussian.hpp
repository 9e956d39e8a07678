#pragma once

// Finite Gaussian blocks over complex coordinates: Schur conditioning with
// eigendecomposition-based regularization, spectral truncation, and sampling.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <string>
#include <vector>

#include "pspde/errors.hpp"
#include "pspde/rng.hpp"

namespace pspde {

using Complex = std::complex<double>;

struct GaussianBlock {
    Eigen::VectorXcd mean;
    Eigen::MatrixXcd cov;

    int dim() const { return static_cast<int>(mean.size()); }
};

/// Eigendecomposition of a Hermitian PSD matrix with a relative eigenvalue
/// cutoff; backs pseudo-inverse solves, log-pseudo-determinants and matrix
/// square roots throughout the filtering code.
class HermitianFactor {
  public:
    explicit HermitianFactor(const Eigen::MatrixXcd& d, double rel_cutoff = 1e-12) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(d);
        if (es.info() != Eigen::Success)
            throw NumericalError("HermitianFactor: eigendecomposition failed");
        u_ = es.eigenvectors();
        evals_ = es.eigenvalues();
        const double lmax = evals_.size() ? evals_.maxCoeff() : 0.0;
        cutoff_ = rel_cutoff * std::max(lmax, 0.0);
        for (int i = 0; i < evals_.size(); ++i)
            if (evals_(i) < 0.0) evals_(i) = 0.0;
    }

    int dim() const { return static_cast<int>(evals_.size()); }

    int rank() const {
        int r = 0;
        for (int i = 0; i < evals_.size(); ++i)
            if (retained(i)) ++r;
        return r;
    }

    /// Pseudo-inverse application (components below the cutoff are dropped).
    Eigen::VectorXcd solve(const Eigen::VectorXcd& rhs) const {
        Eigen::VectorXcd w = u_.adjoint() * rhs;
        for (int i = 0; i < evals_.size(); ++i)
            w(i) = retained(i) ? w(i) / evals_(i) : Complex(0.0, 0.0);
        return u_ * w;
    }

    Eigen::MatrixXcd pinv() const {
        Eigen::VectorXd inv(evals_.size());
        for (int i = 0; i < evals_.size(); ++i) inv(i) = retained(i) ? 1.0 / evals_(i) : 0.0;
        return u_ * inv.asDiagonal() * u_.adjoint();
    }

    /// r^dagger D^+ r (real by Hermitian symmetry).
    double quad_form(const Eigen::VectorXcd& r) const {
        const Eigen::VectorXcd w = u_.adjoint() * r;
        double acc = 0.0;
        for (int i = 0; i < evals_.size(); ++i)
            if (retained(i)) acc += std::norm(w(i)) / evals_(i);
        return acc;
    }

    // Floored variants: eigenvalues are raised to the relative cutoff instead
    // of dropped, so near-degenerate directions act as stiff-but-finite
    // constraints. These back objective evaluations, where the dropped-
    // direction convention would open an unpenalized cliff at D -> 0.

    double floored_eval(int i) const { return std::max(evals_(i), cutoff_); }

    double quad_form_floored(const Eigen::VectorXcd& r) const {
        if (cutoff_ <= 0.0)
            return r.squaredNorm() > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
        const Eigen::VectorXcd w = u_.adjoint() * r;
        double acc = 0.0;
        for (int i = 0; i < evals_.size(); ++i) acc += std::norm(w(i)) / floored_eval(i);
        return acc;
    }

    double log_pdet_floored() const {
        if (cutoff_ <= 0.0) return 0.0;
        double acc = 0.0;
        for (int i = 0; i < evals_.size(); ++i) acc += std::log(floored_eval(i));
        return acc;
    }

    Eigen::VectorXcd solve_floored(const Eigen::VectorXcd& rhs) const {
        Eigen::VectorXcd w = u_.adjoint() * rhs;
        for (int i = 0; i < evals_.size(); ++i)
            w(i) = cutoff_ > 0.0 ? w(i) / floored_eval(i) : Complex(0.0, 0.0);
        return u_ * w;
    }

    Eigen::MatrixXcd inv_floored() const {
        Eigen::VectorXd inv(evals_.size());
        for (int i = 0; i < evals_.size(); ++i)
            inv(i) = cutoff_ > 0.0 ? 1.0 / floored_eval(i) : 0.0;
        return u_ * inv.asDiagonal() * u_.adjoint();
    }

    /// Sum of log of retained eigenvalues.
    double log_pdet() const {
        double acc = 0.0;
        for (int i = 0; i < evals_.size(); ++i)
            if (retained(i)) acc += std::log(evals_(i));
        return acc;
    }

    /// Apply U sqrt(Lambda); maps standard excitations to covariance samples.
    Eigen::VectorXcd apply_sqrt(const Eigen::VectorXcd& z) const {
        Eigen::VectorXcd w = z;
        for (int i = 0; i < evals_.size(); ++i) w(i) *= std::sqrt(evals_(i));
        return u_ * w;
    }

    const Eigen::MatrixXcd& eigenvectors() const { return u_; }
    const Eigen::VectorXd& eigenvalues() const { return evals_; }
    double cutoff() const { return cutoff_; }

  private:
    bool retained(int i) const { return evals_(i) > cutoff_ && evals_(i) > 0.0; }

    Eigen::MatrixXcd u_;
    Eigen::VectorXd evals_;
    double cutoff_;
};

/// Condition a joint Gaussian on a subset of coordinates taking given values.
/// The observed block is inverted through its eigendecomposition with a
/// relative cutoff, so exactly-degenerate blocks act as linear constraints.
inline GaussianBlock block_condition(const GaussianBlock& joint,
                                     const std::vector<int>& observed_idx,
                                     const Eigen::VectorXcd& observed_values) {
    const int n = joint.dim();
    if (static_cast<int>(observed_idx.size()) != observed_values.size())
        throw DimensionError("block_condition: index/value count mismatch");
    for (int i : observed_idx)
        if (i < 0 || i >= n) throw ContractError("block_condition: index out of domain");
    if (observed_idx.empty()) return joint;

    std::vector<bool> is_obs(static_cast<std::size_t>(n), false);
    for (int i : observed_idx) is_obs[static_cast<std::size_t>(i)] = true;
    std::vector<int> keep;
    for (int i = 0; i < n; ++i)
        if (!is_obs[static_cast<std::size_t>(i)]) keep.push_back(i);

    const int nk = static_cast<int>(keep.size());
    const int no = static_cast<int>(observed_idx.size());
    Eigen::VectorXcd mu_k(nk), mu_o(no);
    Eigen::MatrixXcd s_kk(nk, nk), s_ko(nk, no), s_oo(no, no);
    for (int a = 0; a < nk; ++a) {
        mu_k(a) = joint.mean(keep[static_cast<std::size_t>(a)]);
        for (int b = 0; b < nk; ++b)
            s_kk(a, b) = joint.cov(keep[static_cast<std::size_t>(a)], keep[static_cast<std::size_t>(b)]);
        for (int b = 0; b < no; ++b)
            s_ko(a, b) = joint.cov(keep[static_cast<std::size_t>(a)],
                                   observed_idx[static_cast<std::size_t>(b)]);
    }
    for (int a = 0; a < no; ++a) {
        mu_o(a) = joint.mean(observed_idx[static_cast<std::size_t>(a)]);
        for (int b = 0; b < no; ++b)
            s_oo(a, b) = joint.cov(observed_idx[static_cast<std::size_t>(a)],
                                   observed_idx[static_cast<std::size_t>(b)]);
    }

    const HermitianFactor f_oo(s_oo);
    GaussianBlock out;
    out.mean = mu_k + s_ko * f_oo.solve(observed_values - mu_o);
    out.cov = s_kk - s_ko * f_oo.pinv() * s_ko.adjoint();
    out.cov = ((out.cov + out.cov.adjoint()) / 2.0).eval();
    if (!out.mean.allFinite() || !out.cov.allFinite())
        throw NumericalError("block_condition: non-finite conditional (observed block dim " +
                             std::to_string(no) + ", rank " + std::to_string(f_oo.rank()) + ")");
    return out;
}

/// Truncated eigendecomposition: eigenvalues clamped at zero from below,
/// components below threshold * lambda_max dropped, descending order.
struct TruncatedFactor {
    Eigen::MatrixXcd u;      // retained columns
    Eigen::VectorXd lambda;  // retained eigenvalues, descending
    int rank = 0;
    double threshold = 0.0;
};

inline TruncatedFactor eig_truncate(const Eigen::MatrixXcd& d, double threshold) {
    if (threshold < 0.0) throw ContractError("eig_truncate: threshold must be >= 0");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(d);
    if (es.info() != Eigen::Success)
        throw NumericalError("eig_truncate: eigendecomposition failed");
    const int n = static_cast<int>(es.eigenvalues().size());
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0);
    const double lmax = n ? lam.maxCoeff() : 0.0;

    TruncatedFactor out;
    out.threshold = threshold;
    std::vector<int> order;
    for (int i = n - 1; i >= 0; --i)
        if (lam(i) >= threshold * lmax && lam(i) > 0.0) order.push_back(i);
    out.rank = static_cast<int>(order.size());
    out.u.resize(n, out.rank);
    out.lambda.resize(out.rank);
    for (int j = 0; j < out.rank; ++j) {
        out.u.col(j) = es.eigenvectors().col(order[static_cast<std::size_t>(j)]);
        out.lambda(j) = lam(order[static_cast<std::size_t>(j)]);
    }
    return out;
}

/// Sample from a circularly-symmetric complex Gaussian with E[z z^dagger] = cov.
inline Eigen::VectorXcd sample_circular(const GaussianBlock& block, RngStream& rng) {
    const HermitianFactor f(block.cov);
    Eigen::VectorXcd z(block.dim());
    const double inv_sqrt2 = 0.70710678118654752440;
    for (int i = 0; i < z.size(); ++i)
        z(i) = Complex(rng.next_normal(), rng.next_normal()) * inv_sqrt2;
    return block.mean + f.apply_sqrt(z);
}

/// Sample from a real Gaussian; the covariance's real part is used and the
/// mean's imaginary part is expected to be zero.
inline Eigen::VectorXcd sample_real(const GaussianBlock& block, RngStream& rng) {
    Eigen::MatrixXcd c = block.cov.real().cast<Complex>();
    const HermitianFactor f(c);
    Eigen::VectorXcd z(block.dim());
    for (int i = 0; i < z.size(); ++i) z(i) = Complex(rng.next_normal(), 0.0);
    Eigen::VectorXcd out = block.mean + f.apply_sqrt(z);
    for (int i = 0; i < out.size(); ++i) out(i) = Complex(out(i).real(), 0.0);
    return out;
}

}  // namespace pspde
