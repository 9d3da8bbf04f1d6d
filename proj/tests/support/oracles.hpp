#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (direct summation, no shared code with the library
// paths they check).

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <vector>

#include "kmmvae/autodiff.hpp"

namespace oracles {

// C[m x p] = A[m x n] . B[n x p], triple loop.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t n, std::size_t p) {
    std::vector<double> c(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j)
            for (std::size_t k = 0; k < n; ++k) c[i * p + j] += a[i * n + k] * b[k * p + j];
    return c;
}

// Same-padded cross-correlation, direct sliding window.
inline std::vector<double> naive_conv1d(const std::vector<double>& x, const std::vector<double>& k,
                                        const std::vector<double>& bias, std::size_t c_in,
                                        std::size_t len, std::size_t c_out, std::size_t w) {
    std::vector<double> y(c_out * len, 0.0);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(w / 2);
    for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t r = 0; r < len; ++r) {
            double acc = bias[o];
            for (std::size_t ci = 0; ci < c_in; ++ci)
                for (std::size_t t = 0; t < w; ++t) {
                    std::ptrdiff_t src = static_cast<std::ptrdiff_t>(r) + static_cast<std::ptrdiff_t>(t) - pad;
                    if (src >= 0 && src < static_cast<std::ptrdiff_t>(len))
                        acc += k[(o * c_in + ci) * w + t] * x[ci * len + static_cast<std::size_t>(src)];
                }
            y[o * len + r] = acc;
        }
    return y;
}

// Unitary DFT by direct O(R^2) summation.
inline std::vector<std::complex<double>> naive_unitary_dft(const std::vector<std::complex<double>>& x) {
    const std::size_t n = x.size();
    std::vector<std::complex<double>> y(n, {0.0, 0.0});
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = 0; q < n; ++q) {
            double ang = -2.0 * M_PI * static_cast<double>(p * q) / static_cast<double>(n);
            y[p] += x[q] * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        y[p] *= scale;
    }
    return y;
}

// Central finite differences of eval() w.r.t. the values of `param`,
// perturbing them in place. eval must rebuild its computation from the
// current parameter values on every call.
inline std::vector<double> fd_gradient(kmmvae::autodiff::Tensor param,
                                       const std::function<double()>& eval, double h = 1e-6) {
    std::vector<double> base(param.values().begin(), param.values().end());
    std::vector<double> grad(base.size());
    std::vector<double> work = base;
    for (std::size_t i = 0; i < base.size(); ++i) {
        work[i] = base[i] + h;
        param.set_values(work);
        double fp = eval();
        work[i] = base[i] - h;
        param.set_values(work);
        double fm = eval();
        work[i] = base[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    param.set_values(base);
    return grad;
}

// Scale-guarded relative error between analytic and finite-difference
// gradients: |a - b| / max(|a|, |b|, 1).
inline double grad_rel_err(double analytic, double fd) {
    double denom = std::max({std::abs(analytic), std::abs(fd), 1.0});
    return std::abs(analytic - fd) / denom;
}

} // namespace oracles
