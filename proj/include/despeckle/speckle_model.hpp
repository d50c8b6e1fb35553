#pragma once

// Closed-form statistics of the multiplicative speckle model y = n * x with
// n ~ Gamma(shape L, rate L) and an inverse-Gamma prior on the clean value x.
//
//   prior      x | neighbourhood ~ invGamma(alpha, beta)
//   posterior  x | y, neighbourhood ~ invGamma(L + alpha, beta + L y)
//   evidence   p(y) = L^L y^(L-1) beta^alpha / (B(L, alpha) (beta + L y)^(L + alpha))
//   estimate   E[x | y] = (beta + L y) / (L + alpha - 1)
//
// The evidence is the G0_I law. All likelihood arithmetic stays in the log
// domain; Gamma(.) and B(.,.) are never formed directly.

#include <cstdint>

#include "despeckle/raster.hpp"

namespace despeckle {

/// Number of looks of the Gamma(L, L) speckle; always >= 1.
class LookCount {
public:
    explicit LookCount(int looks);
    int value() const noexcept { return looks_; }
    double real() const noexcept { return static_cast<double>(looks_); }
    friend bool operator==(LookCount, LookCount) = default;

private:
    int looks_;
};

/// Per-pixel inverse-Gamma parameters (shape alpha, scale beta).
struct InvGammaParams {
    Raster<double> alpha;
    Raster<double> beta;

    InvGammaParams() = default;
    InvGammaParams(Raster<double> a, Raster<double> b);
    /// Constant maps.
    static InvGammaParams uniform(int height, int width, double alpha, double beta);

    int height() const noexcept { return alpha.height(); }
    int width() const noexcept { return alpha.width(); }
    /// Throws std::domain_error unless every alpha, beta is finite and > 0.
    void validate() const;
};

/// Posterior inverse-Gamma parameters: shape = L + alpha, scale = beta + L y.
struct PosteriorParams {
    Raster<double> shape;
    Raster<double> scale;
};

/// Observations below this value are clamped before entering the likelihood.
inline constexpr double kIntensityFloor = 1e-8;

/// i.i.d. Gamma(L, L) field (mean 1, variance 1/L). Deterministic in `seed`.
IntensityImage sample_speckle(int height, int width, LookCount looks, std::uint64_t seed);

/// Elementwise y = x * n.
IntensityImage apply_speckle(const IntensityImage& clean, const IntensityImage& speckle);

PosteriorParams posterior_update(const InvGammaParams& prior, const IntensityImage& y,
                                 LookCount looks);

/// -log p(y | alpha, beta) under the G0_I evidence.
double neg_log_likelihood(double alpha, double beta, double y, LookCount looks);

struct NllGradient {
    double value = 0.0;
    double d_alpha = 0.0;
    double d_beta = 0.0;
    /// Zero when y was clamped to kIntensityFloor.
    double d_y = 0.0;
};

/// Value and partial derivatives of neg_log_likelihood.
NllGradient neg_log_likelihood_gradient(double alpha, double beta, double y, LookCount looks);

/// Elementwise neg_log_likelihood over maps.
Raster<double> neg_log_likelihood(const InvGammaParams& prior, const IntensityImage& y,
                                  LookCount looks);

/// Mean per-pixel NLL.
double nll_loss(const InvGammaParams& prior, const IntensityImage& y, LookCount looks);

struct NllLoss {
    double value = 0.0;
    Raster<double> d_alpha;
    Raster<double> d_beta;
};

/// Mean per-pixel NLL together with its gradient w.r.t. the alpha and beta maps.
NllLoss nll_loss_with_gradient(const InvGammaParams& prior, const IntensityImage& y,
                               LookCount looks);

/// Posterior mean (beta + L y) / (L + alpha - 1).
double mmse_estimate(double alpha, double beta, double y, LookCount looks);
IntensityImage mmse_estimate(const InvGammaParams& prior, const IntensityImage& y,
                             LookCount looks);

} // namespace despeckle
