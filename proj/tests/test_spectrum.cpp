#include <catch2/catch.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pspde/spectrum.hpp"

using namespace pspde;

namespace {

LogSpectrum random_spectrum(int L, double l_max, std::mt19937_64& eng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::VectorXd tau(L);
    double level = n(eng);
    for (int m = 0; m < L; ++m) {
        level += 0.3 * n(eng) - 0.2;  // random walk with a downward drift
        tau(m) = level;
    }
    return LogSpectrum(tau, l_max, std::exp(tau(0)));
}

double rel_err(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b) {
    const double scale = std::max(a.norm(), b.norm());
    if (scale == 0.0) return 0.0;
    return (a - b).norm() / scale;
}

}  // namespace

TEST_CASE("sigma_sq_at basics") {
    SECTION("flat spectrum") {
        const double a = 0.7;
        LogSpectrum s(Eigen::VectorXd::Constant(10, a), 5.0, 1.0);
        REQUIRE(s.sigma_sq_at(1.0) == Approx(std::exp(2 * a)));
        REQUIRE(s.sigma_sq_at(37.5) == Approx(std::exp(2 * a)));
    }
    SECTION("zero mode bypass") {
        LogSpectrum s(Eigen::VectorXd::Zero(10), 5.0, 2.0);
        REQUIRE(s.sigma_sq_at(0.0) == 4.0);
    }
    SECTION("|k|^-6 power law at kappa = 10") {
        const auto s = power_law_spectrum(-6.0, 1.0, 500, std::log(1000.0));
        REQUIRE(s.sigma_sq_at(10.0) == Approx(1e-6).epsilon(1e-9));
    }
    SECTION("clamping below kappa = 1 and range error above e^l_max") {
        const auto s = power_law_spectrum(-6.0, 1.0, 100, std::log(100.0));
        REQUIRE(s.sigma_sq_at(0.5) == Approx(s.sigma_sq_at(1.0)));
        REQUIRE_THROWS_AS(s.sigma_sq_at(101.0), OutOfRangeError);
    }
}

TEST_CASE("power law spectrum values") {
    const auto s = power_law_spectrum(-6.0, 1.0, 200, std::log(64.0));
    REQUIRE(s.sigma_sq_at(1.0) == Approx(1.0));
    REQUIRE(s.sigma_sq_at(2.0) == Approx(std::pow(2.0, -6.0)).epsilon(1e-9));
    const auto flat = power_law_spectrum(0.0, 0.5, 50, 3.0);
    REQUIRE(flat.sigma_sq_at(7.0) == Approx(0.25));
    REQUIRE_THROWS_AS(power_law_spectrum(-6.0, 0.0, 50, 3.0), ParameterError);
}

TEST_CASE("mode covariance reduces to the n = 0 term for fast-decaying spectra") {
    // Slope so steep that every |k + nK| with n != 0 underflows to zero power.
    const int K = 8;
    const auto s = power_law_spectrum(-400.0, 1.0, 50, default_l_max(K, 1));
    SpectrumHyper hyper;
    hyper.n_max = 1;
    const auto d = mode_covariance(1, s, hyper, 0, K);
    REQUIRE(d.rows() == 1);
    REQUIRE(d(0, 0).real() == Approx(s.sigma_sq_at(1.0)));
    REQUIRE(d(0, 0).imag() == 0.0);
}

TEST_CASE("mode covariance matches the brute-force aliased sum") {
    std::mt19937_64 eng(202);
    for (int K : {4, 8, 16}) {
        for (int order : {0, 1, 2}) {
            for (int n_max : {1, 2, 5}) {
                SpectrumHyper hyper;
                hyper.n_max = n_max;
                const double l_max = default_l_max(K, n_max);

                const auto flat = power_law_spectrum(0.0, 1.0, 64, l_max);
                const auto rough = random_spectrum(64, l_max, eng);
                for (const auto& spec : {flat, rough}) {
                    const auto var = [&](double kappa) { return spec.sigma_sq_at(kappa); };
                    for (int k = -K / 2 + 1; k <= K / 2; ++k) {
                        const auto d = mode_covariance(k, spec, hyper, order, K);
                        const auto ref =
                            oracle::brute_force_mode_covariance(k, K, order, n_max, var);
                        REQUIRE(rel_err(d, ref) < 1e-13);
                    }
                }
            }
        }
    }
}

TEST_CASE("mode covariance invariants over random spectra") {
    std::mt19937_64 eng(7);
    const int K = 8, order = 2;
    SpectrumHyper hyper;
    hyper.n_max = 2;
    const double l_max = default_l_max(K, hyper.n_max);

    for (int trial = 0; trial < 100; ++trial) {
        const auto spec = random_spectrum(32, l_max, eng);
        for (int k = 0; k <= K / 2; ++k) {
            const auto d = mode_covariance(k, spec, hyper, order, K);

            // Hermitian, exactly as constructed.
            REQUIRE((d - d.adjoint()).norm() == 0.0);

            // Positive semidefinite within roundoff.
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(d);
            REQUIRE(es.eigenvalues().minCoeff() >= -1e-12 * d.real().trace());

            // Entry parity: real for even c+d, purely imaginary for odd.
            for (int c = 0; c <= order; ++c)
                for (int e = 0; e <= order; ++e) {
                    if ((c + e) % 2 == 0)
                        REQUIRE(d(c, e).imag() == 0.0);
                    else
                        REQUIRE(d(c, e).real() == 0.0);
                }

            // Reality symmetry for modes with a stored partner.
            if (k > 0 && k < K / 2) {
                const auto dneg = mode_covariance(-k, spec, hyper, order, K);
                REQUIRE(rel_err(dneg, d.conjugate()) < 1e-12);
            }
        }
    }
}

TEST_CASE("uniform power rescaling scales every covariance entry") {
    const int K = 8, order = 2;
    SpectrumHyper hyper;
    hyper.n_max = 2;
    std::mt19937_64 eng(99);
    const double l_max = default_l_max(K, hyper.n_max);
    const auto spec = random_spectrum(48, l_max, eng);

    const double alpha = 3.7;
    LogSpectrum scaled = spec;
    scaled.tau.array() += 0.5 * std::log(alpha);
    scaled.sigma0 *= std::sqrt(alpha);

    for (int k = 0; k <= K / 2; ++k) {
        const auto d0 = mode_covariance(k, spec, hyper, order, K);
        const auto d1 = mode_covariance(k, scaled, hyper, order, K);
        REQUIRE(rel_err(d1, alpha * d0) < 1e-12);
    }
}

TEST_CASE("mode covariance gradient matches finite differences") {
    const int K = 8, order = 2;
    SpectrumHyper hyper;
    hyper.n_max = 2;
    std::mt19937_64 eng(5);
    const double l_max = default_l_max(K, hyper.n_max);
    const auto spec = random_spectrum(24, l_max, eng);
    const double eps = 1e-6;

    for (int k : {0, 1, 3, K / 2}) {
        const auto grads = mode_covariance_grad(k, spec, hyper, order, K);
        for (const auto& [node, g] : grads) {
            LogSpectrum up = spec, dn = spec;
            up.tau(node) += eps;
            dn.tau(node) -= eps;
            const Eigen::MatrixXcd fd = (mode_covariance(k, up, hyper, order, K) -
                                         mode_covariance(k, dn, hyper, order, K)) /
                                        (2.0 * eps);
            REQUIRE(rel_err(g, fd) < 1e-6);
        }
    }
}

TEST_CASE("gradient blocks vanish on tau nodes outside every alias cell") {
    const int K = 8, order = 1;
    SpectrumHyper hyper;
    hyper.n_max = 1;
    // Frequencies reach at most 12; a fine enough grid leaves the last cells empty.
    const int L = 40;
    const double l_max = std::log(16.0);
    const auto spec = power_law_spectrum(-2.0, 1.0, L, l_max);
    for (int k = 0; k <= K / 2; ++k) {
        const auto grads = mode_covariance_grad(k, spec, hyper, order, K);
        for (const auto& [node, g] : grads) {
            REQUIRE(node <= 36);  // log(12)/dl ~ 34.9; nodes beyond its cell stay empty
            REQUIRE(g.norm() > 0.0);
        }
    }
}

TEST_CASE("sum of tau gradients equals the uniform-shift derivative") {
    const int K = 8, order = 2;
    SpectrumHyper hyper;
    hyper.n_max = 2;
    std::mt19937_64 eng(31);
    const auto spec = random_spectrum(24, default_l_max(K, hyper.n_max), eng);
    const double eps = 1e-6;

    for (int k : {0, 2, K / 2}) {
        Eigen::MatrixXcd total = Eigen::MatrixXcd::Zero(order + 1, order + 1);
        for (const auto& [node, g] : mode_covariance_grad(k, spec, hyper, order, K)) total += g;

        LogSpectrum up = spec, dn = spec;
        up.tau.array() += eps;
        dn.tau.array() -= eps;
        const Eigen::MatrixXcd fd =
            (mode_covariance(k, up, hyper, order, K) - mode_covariance(k, dn, hyper, order, K)) /
            (2.0 * eps);
        REQUIRE(rel_err(total, fd) < 1e-6);
    }
}

TEST_CASE("covariance vjp contraction agrees with the per-node gradient") {
    const int K = 8, order = 2;
    SpectrumHyper hyper;
    hyper.n_max = 2;
    std::mt19937_64 eng(13);
    const int L = 24;
    const auto spec = random_spectrum(L, default_l_max(K, hyper.n_max), eng);

    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXcd g(order + 1, order + 1);
    for (int c = 0; c <= order; ++c)
        for (int d = 0; d <= order; ++d) g(c, d) = Complex(n(eng), n(eng));
    g = ((g + g.adjoint()) / 2.0).eval();  // Hermitian weight

    for (int k : {0, 1, K / 2}) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(L);
        accumulate_mode_covariance_vjp(k, spec, hyper, order, K, g, grad);

        Eigen::VectorXd expected = Eigen::VectorXd::Zero(L);
        for (const auto& [node, dd] : mode_covariance_grad(k, spec, hyper, order, K))
            expected(node) += (g.conjugate().cwiseProduct(dd)).sum().real();

        REQUIRE((grad - expected).norm() < 1e-10 * std::max(1.0, expected.norm()));
    }
}

TEST_CASE("tail warning fires for non-decaying spectra only") {
    const int K = 8;
    SpectrumHyper hyper;
    hyper.n_max = 100;
    const double l_max = default_l_max(K, hyper.n_max);
    const auto flat = power_law_spectrum(0.0, 1.0, 500, l_max);
    const auto steep = power_law_spectrum(-6.0, 1.0, 500, l_max);
    REQUIRE(build_mode_covariances(K, 2, flat, hyper).tail_warning);
    REQUIRE_FALSE(build_mode_covariances(K, 2, steep, hyper).tail_warning);
}

TEST_CASE("default l_max covers all aliases including the Nyquist edge") {
    const int K = 16;
    SpectrumHyper hyper;
    hyper.n_max = 3;
    const auto spec = power_law_spectrum(-6.0, 1.0, 64, default_l_max(K, hyper.n_max));
    REQUIRE_NOTHROW(build_mode_covariances(K, 2, spec, hyper));
}

TEST_CASE("tau excitation map endpoints and linearity") {
    SpectrumHyper hyper;
    hyper.sigma_tau = 2.0;
    hyper.offset = 1.5;
    hyper.slope = -3.0;
    const int L = 12;
    const double l_max = 4.0;
    TauExcitationMap map(L, l_max, hyper);

    SECTION("zero excitations give the pure power law") {
        const auto tau = map.tau(Eigen::VectorXd::Zero(L));
        for (int m = 0; m < L; ++m)
            REQUIRE(tau(m) == Approx(1.5 - 3.0 * m * l_max / (L - 1)).margin(1e-14));
    }
    SECTION("sigma_tau = 0 gives the line for any excitation") {
        SpectrumHyper h0 = hyper;
        h0.sigma_tau = 0.0;
        TauExcitationMap flat(L, l_max, h0);
        std::mt19937_64 eng(1);
        std::normal_distribution<double> n(0.0, 1.0);
        Eigen::VectorXd xi(L);
        for (int m = 0; m < L; ++m) xi(m) = n(eng);
        const auto tau = flat.tau(xi);
        for (int m = 0; m < L; ++m)
            REQUIRE(tau(m) == Approx(1.5 - 3.0 * m * l_max / (L - 1)).margin(1e-14));
    }
    SECTION("superposition in the excitations") {
        std::mt19937_64 eng(2);
        std::normal_distribution<double> n(0.0, 1.0);
        Eigen::VectorXd x1(L), x2(L);
        for (int m = 0; m < L; ++m) {
            x1(m) = n(eng);
            x2(m) = n(eng);
        }
        const Eigen::VectorXd lhs = map.deviations(2.0 * x1 - 0.5 * x2);
        const Eigen::VectorXd rhs = 2.0 * map.deviations(x1) - 0.5 * map.deviations(x2);
        REQUIRE((lhs - rhs).norm() < 1e-12 * std::max(1.0, rhs.norm()));
    }
    SECTION("length mismatch is rejected") {
        REQUIRE_THROWS_AS(map.deviations(Eigen::VectorXd::Zero(L + 1)), DimensionError);
    }
}

TEST_CASE("tau excitation samples reproduce the composed-transition covariance") {
    SpectrumHyper hyper;
    hyper.sigma_tau = 1.3;
    hyper.offset = 0.0;
    hyper.slope = 0.0;
    const int L = 5;
    const double l_max = 2.0;
    const double dl = l_max / (L - 1);
    TauExcitationMap map(L, l_max, hyper);

    // Oracle: propagate the joint (position, velocity) covariance node by node
    // with the exact transition, starting from the level/tilt spread at l = 0.
    const double st2 = hyper.sigma_tau * hyper.sigma_tau;
    Eigen::Matrix2d a;
    a << 1.0, dl, 0.0, 1.0;
    Eigen::Matrix2d q;
    q << dl * dl * dl / 3.0, dl * dl / 2.0, dl * dl / 2.0, dl;
    q *= st2;

    std::vector<Eigen::Matrix2d> self(L);
    self[0] << st2 * l_max * l_max * l_max / 3.0, 0.0, 0.0, st2 * l_max;
    for (int m = 1; m < L; ++m)
        self[static_cast<std::size_t>(m)] =
            a * self[static_cast<std::size_t>(m - 1)] * a.transpose() + q;

    Eigen::MatrixXd target(L, L);
    for (int mrow = 0; mrow < L; ++mrow) {
        target(mrow, mrow) = self[static_cast<std::size_t>(mrow)](0, 0);
        Eigen::Matrix2d cross = self[static_cast<std::size_t>(mrow)];
        for (int mcol = mrow + 1; mcol < L; ++mcol) {
            cross = (a * cross).eval();  // cov(x_{col}, x_{row})
            target(mcol, mrow) = cross(0, 0);
            target(mrow, mcol) = cross(0, 0);
        }
    }

    const int n_draws = 100000;
    std::mt19937_64 eng(77);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(L, L);
    Eigen::VectorXd xi(L);
    for (int s = 0; s < n_draws; ++s) {
        for (int m = 0; m < L; ++m) xi(m) = n(eng);
        const Eigen::VectorXd d = map.deviations(xi);
        acc += d * d.transpose();
    }
    acc /= n_draws;
    REQUIRE((acc - target).norm() / target.norm() < 0.03);
}

TEST_CASE("temporal update") {
    Eigen::VectorXd tau_prev = Eigen::VectorXd::Constant(6, 2.0);
    SECTION("zero increment") {
        REQUIRE((temporal_update(tau_prev, 0.7, Eigen::VectorXd::Zero(6)) - tau_prev).norm() ==
                0.0);
    }
    SECTION("zero delta") {
        Eigen::VectorXd tilde = Eigen::VectorXd::Constant(6, -1.0);
        REQUIRE((temporal_update(tau_prev, 0.0, tilde) - tau_prev).norm() == 0.0);
    }
    SECTION("linearity: half of a slope -6 line added at delta 0.5") {
        Eigen::VectorXd zero = Eigen::VectorXd::Zero(5);
        Eigen::VectorXd tilde(5);
        for (int m = 0; m < 5; ++m) tilde(m) = -6.0 * m;
        const auto out = temporal_update(zero, 0.5, tilde);
        for (int m = 0; m < 5; ++m) REQUIRE(out(m) == Approx(-3.0 * m));
    }
    SECTION("grid mismatch") {
        REQUIRE_THROWS_AS(temporal_update(tau_prev, 0.1, Eigen::VectorXd::Zero(5)),
                          DimensionError);
    }
}
