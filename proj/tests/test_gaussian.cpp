#include <catch2/catch.hpp>

#include <Eigen/Dense>
#include <random>

#include "oracles.hpp"
#include "pspde/gaussian.hpp"
#include "pspde/rng.hpp"
#include "test_util.hpp"

using namespace pspde;

TEST_CASE("conditioning with zero cross-covariance leaves the marginal unchanged") {
    std::mt19937_64 eng(1);
    GaussianBlock joint;
    joint.mean = testutil::random_complex_vector(5, eng);
    joint.cov = Eigen::MatrixXcd::Zero(5, 5);
    joint.cov.topLeftCorner(3, 3) = testutil::random_hermitian_psd(3, eng);
    joint.cov.bottomRightCorner(2, 2) = testutil::random_hermitian_psd(2, eng);

    const auto cond = block_condition(joint, {3, 4}, testutil::random_complex_vector(2, eng));
    REQUIRE((cond.mean - joint.mean.head(3)).norm() < 1e-12);
    REQUIRE((cond.cov - joint.cov.topLeftCorner(3, 3)).norm() < 1e-12);
}

TEST_CASE("observing the full vector collapses the conditional") {
    std::mt19937_64 eng(2);
    GaussianBlock joint;
    joint.mean = testutil::random_complex_vector(4, eng);
    joint.cov = testutil::random_hermitian_psd(4, eng);
    const Eigen::VectorXcd values = testutil::random_complex_vector(4, eng);
    const auto cond = block_condition(joint, {0, 1, 2, 3}, values);
    REQUIRE(cond.dim() == 0);
}

TEST_CASE("conditioning matches the independent dense Schur oracle") {
    std::mt19937_64 eng(3);
    for (int trial = 0; trial < 25; ++trial) {
        GaussianBlock joint;
        joint.mean = testutil::random_complex_vector(6, eng);
        joint.cov = testutil::random_hermitian_psd(6, eng);
        const std::vector<int> obs = {1, 4};
        const Eigen::VectorXcd values = testutil::random_complex_vector(2, eng);

        const auto cond = block_condition(joint, obs, values);
        const auto ref = oracle::dense_condition(joint.mean, joint.cov, obs, values);
        REQUIRE((cond.mean - ref.mean).norm() < 1e-12 * std::max(1.0, ref.mean.norm()));
        REQUIRE((cond.cov - ref.cov).norm() < 1e-12 * std::max(1.0, ref.cov.norm()));

        // Conditional covariance is Hermitian PSD.
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(cond.cov);
        REQUIRE(es.eigenvalues().minCoeff() >= -1e-12 * cond.cov.real().trace());
    }
}

TEST_CASE("conditioning on an exactly singular observed block acts as a constraint") {
    // Observed coordinate is a copy of a kept one (rank-deficient joint).
    GaussianBlock joint;
    joint.mean = Eigen::VectorXcd::Zero(2);
    joint.cov.resize(2, 2);
    joint.cov << Complex(1.0, 0.0), Complex(1.0, 0.0), Complex(1.0, 0.0), Complex(1.0, 0.0);
    Eigen::VectorXcd val(1);
    val << Complex(2.0, 0.0);
    const auto cond = block_condition(joint, {1}, val);
    REQUIRE(std::abs(cond.mean(0) - Complex(2.0, 0.0)) < 1e-12);
    REQUIRE(std::abs(cond.cov(0, 0)) < 1e-12);
}

TEST_CASE("eig_truncate") {
    std::mt19937_64 eng(4);
    SECTION("threshold 0 keeps full rank and reconstructs exactly") {
        const auto d = testutil::random_hermitian_psd(4, eng);
        const auto f = eig_truncate(d, 0.0);
        REQUIRE(f.rank == 4);
        const Eigen::MatrixXcd rec = f.u * f.lambda.asDiagonal() * f.u.adjoint();
        REQUIRE((rec - d).norm() < 1e-12 * d.norm());
        // Retained columns stay orthonormal.
        REQUIRE((f.u.adjoint() * f.u - Eigen::MatrixXcd::Identity(4, 4)).norm() < 1e-12);
    }
    SECTION("rank-1 input with threshold 0.5") {
        Eigen::VectorXcd q = testutil::random_complex_vector(3, eng);
        const Eigen::MatrixXcd d = q * q.adjoint();
        const auto f = eig_truncate(d, 0.5);
        REQUIRE(f.rank == 1);
    }
    SECTION("reconstruction error bounded by the dropped eigenvalue mass") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto d = testutil::random_hermitian_psd(5, eng);
            const auto full = eig_truncate(d, 0.0);
            const auto f = eig_truncate(d, 1e-2);
            double dropped = 0.0;
            for (int i = f.rank; i < full.rank; ++i) dropped += full.lambda(i);
            const Eigen::MatrixXcd rec = f.u * f.lambda.asDiagonal() * f.u.adjoint();
            REQUIRE((rec - d).norm() <= dropped + 1e-12);
        }
    }
    SECTION("eigenvalues come out descending") {
        const auto f = eig_truncate(testutil::random_hermitian_psd(5, eng), 0.0);
        for (int i = 1; i < f.rank; ++i) REQUIRE(f.lambda(i) <= f.lambda(i - 1));
    }
}

TEST_CASE("circular sampling reproduces the covariance") {
    std::mt19937_64 eng(5);
    GaussianBlock block;
    block.mean = testutil::random_complex_vector(3, eng);
    block.cov = testutil::random_hermitian_psd(3, eng);

    RngStream rng(123, 0, "test");
    const int n = 40000;
    Eigen::MatrixXcd acc = Eigen::MatrixXcd::Zero(3, 3);
    Eigen::MatrixXcd pseudo = Eigen::MatrixXcd::Zero(3, 3);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXcd z = sample_circular(block, rng) - block.mean;
        acc += z * z.adjoint();
        pseudo += z * z.transpose();
    }
    acc /= n;
    pseudo /= n;
    REQUIRE((acc - block.cov).norm() / block.cov.norm() < 0.05);
    // Circular symmetry: the pseudo-covariance vanishes.
    REQUIRE(pseudo.norm() / block.cov.norm() < 0.05);
}

TEST_CASE("real sampling uses the full variance") {
    GaussianBlock block;
    block.mean = Eigen::VectorXcd::Zero(1);
    block.cov = Eigen::MatrixXcd::Identity(1, 1) * 4.0;
    RngStream rng(9, 1, "test");
    double acc = 0.0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
        const auto z = sample_real(block, rng);
        REQUIRE(z(0).imag() == 0.0);
        acc += z(0).real() * z(0).real();
    }
    REQUIRE(acc / n == Approx(4.0).epsilon(0.05));
}
