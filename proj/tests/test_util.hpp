#pragma once

// Shared helpers for the test suites: random Hermitian PSD matrices, random
// mode states, and a default spectrum/state factory.

#include <Eigen/Dense>
#include <complex>
#include <random>

#include "pspde/markov.hpp"
#include "pspde/spectrum.hpp"

namespace testutil {

using Complex = std::complex<double>;

inline Eigen::MatrixXcd random_hermitian_psd(int n, std::mt19937_64& eng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::MatrixXcd a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = Complex(d(eng), d(eng));
    return scale * (a * a.adjoint());
}

inline Eigen::VectorXcd random_complex_vector(int n, std::mt19937_64& eng) {
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::VectorXcd v(n);
    for (int i = 0; i < n; ++i) v(i) = Complex(d(eng), d(eng));
    return v;
}

inline pspde::ModeState random_mode_state(int order, std::mt19937_64& eng, bool real_mode = false) {
    pspde::ModeState m;
    m.u = random_complex_vector(order + 1, eng);
    m.v = random_complex_vector(order, eng);
    if (real_mode) {
        m.u = m.u.real().cast<Complex>();
        m.v = m.v.real().cast<Complex>();
    }
    return m;
}

/// Random full SimState with a |k|^-6 spectrum (coefficients drawn at the
/// spectrum's scale so states look like typical fields).
inline pspde::SimState random_sim_state(int K, int order, std::uint64_t rng_seed,
                                        double amplitude = 1.0) {
    std::mt19937_64 eng(rng_seed);
    pspde::SimState s;
    s.K = K;
    s.order = order;
    s.spectrum = pspde::power_law_spectrum(-6.0, amplitude, 400, pspde::default_l_max(K, 100));
    s.modes.resize(static_cast<std::size_t>(K / 2 + 1));
    for (int k = 0; k <= K / 2; ++k)
        s.mode(k) = random_mode_state(order, eng, k == 0 || k == K / 2);
    return s;
}

}  // namespace testutil
