#pragma once

// Independent reference computations used only by the test suites. None of
// these call into the library's closed-form likelihood or estimator.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace oracle {

// log of Gamma(shape L, scale x / L) density at y plus log invGamma(alpha, beta)
// density at x, in the variable t = log x (Jacobian included).
inline double log_joint(double t, double alpha, double beta, double y, double looks)
{
    const double x = std::exp(t);
    const double log_speckle = looks * std::log(looks / x) + (looks - 1.0) * std::log(y) -
                               looks * y / x - std::lgamma(looks);
    const double log_prior = alpha * std::log(beta) - std::lgamma(alpha) -
                             (alpha + 1.0) * std::log(x) - beta / x;
    return log_speckle + log_prior + t;
}

/// log of the marginal  integral p(y | x) p(x) dx, by adaptive Gauss-Kronrod
/// quadrature in log-x around the integrand peak.
inline double log_marginal_quadrature(double alpha, double beta, double y, double looks)
{
    // locate the peak on a coarse grid, then refine
    double best_t = 0.0, best = -std::numeric_limits<double>::infinity();
    for (double t = -60.0; t <= 60.0; t += 0.01) {
        const double v = log_joint(t, alpha, beta, y, looks);
        if (v > best) {
            best = v;
            best_t = t;
        }
    }
    // extend until the integrand has fallen by e^-60 on both sides
    double lo = best_t, hi = best_t;
    while (log_joint(lo, alpha, beta, y, looks) - best > -60.0)
        lo -= 0.05;
    while (log_joint(hi, alpha, beta, y, looks) - best > -60.0)
        hi += 0.05;
    auto f = [&](double t) { return std::exp(log_joint(t, alpha, beta, y, looks) - best); };
    double err = 0.0;
    const double integral =
        boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, hi, 20, 1e-13, &err);
    return best + std::log(integral);
}

/// Mean of n draws from invGamma(shape, scale), i.e. scale / Gamma(shape, 1).
inline double inverse_gamma_sample_mean(double shape, double scale, std::size_t n,
                                        std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> gamma(shape, 1.0);
    long double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        sum += scale / gamma(rng);
    return static_cast<double>(sum / static_cast<long double>(n));
}

/// Differential entropy  -integral p log p  of the marginal of y, by quadrature
/// over log y using the quadrature marginal at each node.
inline double marginal_entropy(double alpha, double beta, double looks)
{
    auto integrand = [&](double s) {
        const double y = std::exp(s);
        const double lp = log_marginal_quadrature(alpha, beta, y, looks);
        return -std::exp(lp) * lp * y;
    };
    return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, -25.0, 12.0,
                                                                           12, 1e-9);
}

} // namespace oracle
