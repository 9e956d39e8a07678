#pragma once

// Spatial grid and spectral bookkeeping for real periodic fields on [0, 1):
// half-spectrum storage with structural Hermitian symmetry, unnormalized
// synthesis / 1/K-normalized analysis, and spectral derivative factors.

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "pspde/errors.hpp"

namespace pspde {

using Complex = std::complex<double>;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi_v<double>;

/// Regular grid of K points x_j = j / K on the unit periodic domain.
struct SpatialGrid {
    int K;

    explicit SpatialGrid(int k_points) : K(k_points) {
        if (K < 4 || K % 2 != 0)
            throw ContractError("SpatialGrid: K must be even and >= 4, got " +
                                std::to_string(K));
    }

    double position(int j) const { return static_cast<double>(j) / K; }

    std::vector<double> positions() const {
        std::vector<double> x(static_cast<std::size_t>(K));
        for (int j = 0; j < K; ++j) x[static_cast<std::size_t>(j)] = position(j);
        return x;
    }
};

/// Mode indices k in {-K/2+1, ..., -1, 0, 1, ..., K/2}, ascending.
/// Only the non-negative half (0 .. K/2) is stored anywhere; negative modes
/// are implied by conjugation.
struct ModeSet {
    int K;

    explicit ModeSet(int k_points) : K(k_points) {
        if (K < 4 || K % 2 != 0)
            throw ContractError("ModeSet: K must be even and >= 4");
    }

    int count() const { return K; }
    int half_count() const { return K / 2 + 1; }
    int nyquist() const { return K / 2; }
    bool is_nyquist(int k) const { return k == K / 2; }
    bool is_real_mode(int k) const { return k == 0 || k == K / 2; }

    /// Ascending full-spectrum index ordering: position p holds k = p - K/2 + 1.
    int mode_at(int position) const { return position - K / 2 + 1; }
    int position_of(int k) const { return k + K / 2 - 1; }
};

/// Complex coefficients of a real field, stored on the half-spectrum
/// k = 0 .. K/2. Negative modes are conj of the stored ones, which makes the
/// Hermitian constraint structural; c_0 and c_{K/2} are kept exactly real.
class FourierField {
  public:
    FourierField() : K_(0) {}

    explicit FourierField(int k_points)
        : K_(k_points), half_(static_cast<std::size_t>(k_points / 2 + 1), Complex(0.0, 0.0)) {
        if (K_ < 4 || K_ % 2 != 0)
            throw ContractError("FourierField: K must be even and >= 4");
    }

    int grid_size() const { return K_; }
    int half_count() const { return K_ / 2 + 1; }

    /// Coefficient for any mode in {-K/2+1, ..., K/2}.
    Complex at(int k) const {
        check_mode(k);
        if (k >= 0) return half_[static_cast<std::size_t>(k)];
        return std::conj(half_[static_cast<std::size_t>(-k)]);
    }

    /// Set the coefficient for a non-negative mode. Imaginary parts of the
    /// k = 0 and Nyquist coefficients are dropped (those modes are real).
    void set(int k, Complex value) {
        if (k < 0 || k > K_ / 2)
            throw ContractError("FourierField::set expects 0 <= k <= K/2");
        if (k == 0 || k == K_ / 2) value = Complex(value.real(), 0.0);
        half_[static_cast<std::size_t>(k)] = value;
    }

    const std::vector<Complex>& half_spectrum() const { return half_; }

    /// Full-spectrum view in ascending mode order (-K/2+1 .. K/2).
    std::vector<Complex> full_spectrum() const {
        ModeSet modes(K_);
        std::vector<Complex> full(static_cast<std::size_t>(K_));
        for (int p = 0; p < K_; ++p)
            full[static_cast<std::size_t>(p)] = at(modes.mode_at(p));
        return full;
    }

    /// Build from a full ascending-order spectrum, verifying the Hermitian
    /// constraint c_{-k} = conj(c_k) up to `tol` times the coefficient scale.
    static FourierField from_full_spectrum(const std::vector<Complex>& full,
                                           double tol = 1e-12) {
        const int K = static_cast<int>(full.size());
        FourierField f(K);
        ModeSet modes(K);
        double scale = 0.0;
        for (const Complex& c : full) scale = std::max(scale, std::abs(c));
        const double bound = tol * std::max(scale, 1e-300);
        for (int k = 1; k < K / 2; ++k) {
            const Complex pos = full[static_cast<std::size_t>(modes.position_of(k))];
            const Complex neg = full[static_cast<std::size_t>(modes.position_of(-k))];
            if (std::abs(neg - std::conj(pos)) > bound)
                throw ContractError("from_full_spectrum: input is not Hermitian at k=" +
                                    std::to_string(k));
            f.half_[static_cast<std::size_t>(k)] = pos;
        }
        const Complex c0 = full[static_cast<std::size_t>(modes.position_of(0))];
        const Complex cn = full[static_cast<std::size_t>(modes.position_of(K / 2))];
        if (std::abs(c0.imag()) > bound || std::abs(cn.imag()) > bound)
            throw ContractError("from_full_spectrum: c_0 and c_{K/2} must be real");
        f.half_[0] = Complex(c0.real(), 0.0);
        f.half_[static_cast<std::size_t>(K / 2)] = Complex(cn.real(), 0.0);
        return f;
    }

  private:
    void check_mode(int k) const {
        if (k < -K_ / 2 + 1 || k > K_ / 2)
            throw ContractError("FourierField: mode " + std::to_string(k) +
                                " outside {-K/2+1..K/2} for K=" + std::to_string(K_));
    }

    int K_;
    std::vector<Complex> half_;
};

namespace detail {

/// In-place complex DFT: x_m <- sum_j x_j exp(sign * 2*pi*i * m*j / n).
/// Radix-2 iterative FFT for powers of two, direct summation otherwise
/// (n is small whenever it is not a power of two in this codebase).
inline void dft_inplace(std::vector<Complex>& x, int sign) {
    const std::size_t n = x.size();
    if (n == 0) return;
    if ((n & (n - 1)) != 0) {
        std::vector<Complex> out(n, Complex(0.0, 0.0));
        for (std::size_t m = 0; m < n; ++m) {
            Complex acc(0.0, 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                const double ang = sign * kTwoPi * static_cast<double>(m * j % n) /
                                   static_cast<double>(n);
                acc += x[j] * Complex(std::cos(ang), std::sin(ang));
            }
            out[m] = acc;
        }
        x = std::move(out);
        return;
    }
    // Bit-reversal permutation.
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(x[i], x[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * kTwoPi / static_cast<double>(len);
        const Complex wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            Complex w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const Complex a = x[i + j];
                const Complex b = x[i + j + len / 2] * w;
                x[i + j] = a + b;
                x[i + j + len / 2] = a - b;
                w *= wl;
            }
        }
    }
}

}  // namespace detail

/// s_j = sum_k c_k exp(2*pi*i*k*x_j), no normalization factor. The Hermitian
/// storage guarantees a real result; residual imaginary parts are roundoff
/// and are discarded.
inline std::vector<double> dft_synthesize(const FourierField& modes, const SpatialGrid& grid) {
    if (modes.grid_size() != grid.K)
        throw DimensionError("dft_synthesize: mode count " + std::to_string(modes.grid_size()) +
                             " does not match grid K=" + std::to_string(grid.K));
    const int K = grid.K;
    // Pack into standard DFT layout: slot m holds mode k = m (m <= K/2), k = m - K (m > K/2).
    std::vector<Complex> buf(static_cast<std::size_t>(K));
    for (int m = 0; m < K; ++m) {
        const int k = (m <= K / 2) ? m : m - K;
        buf[static_cast<std::size_t>(m)] = modes.at(k);
    }
    detail::dft_inplace(buf, +1);
    std::vector<double> out(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j) out[static_cast<std::size_t>(j)] = buf[static_cast<std::size_t>(j)].real();
    return out;
}

/// c_k = (1/K) sum_j v_j exp(-2*pi*i*k*x_j); inverse of dft_synthesize.
inline FourierField dft_analyze(const std::vector<double>& values, const SpatialGrid& grid) {
    if (static_cast<int>(values.size()) != grid.K)
        throw DimensionError("dft_analyze: got " + std::to_string(values.size()) +
                             " values for grid K=" + std::to_string(grid.K));
    const int K = grid.K;
    std::vector<Complex> buf(static_cast<std::size_t>(K));
    for (int j = 0; j < K; ++j)
        buf[static_cast<std::size_t>(j)] = Complex(values[static_cast<std::size_t>(j)], 0.0);
    detail::dft_inplace(buf, -1);
    FourierField f(K);
    const double inv_k = 1.0 / K;
    for (int k = 0; k <= K / 2; ++k)
        f.set(k, buf[static_cast<std::size_t>(k)] * inv_k);
    return f;
}

/// Spectral derivative factor (2*pi*i*k)^c. At the Nyquist mode with odd c
/// the factor is 0: the odd derivative of the (-1)^j mode has no real
/// representation on the grid, so the derivative operator annihilates it.
inline Complex derivative_factor(int k, int c, int K) {
    if (c < 0) throw ContractError("derivative_factor: order c must be >= 0");
    if (c == 0) return Complex(1.0, 0.0);
    if (k == K / 2 && c % 2 == 1) return Complex(0.0, 0.0);
    const Complex base(0.0, kTwoPi * k);
    Complex out(1.0, 0.0);
    for (int i = 0; i < c; ++i) out *= base;
    return out;
}

}  // namespace pspde
