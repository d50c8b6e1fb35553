#include "despeckle/speckle_model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace despeckle {

namespace {

void check_prior(double alpha, double beta)
{
    if (!(alpha > 0.0) || !std::isfinite(alpha))
        throw std::domain_error("inverse-Gamma shape must be finite and > 0, got " +
                                std::to_string(alpha));
    if (!(beta > 0.0) || !std::isfinite(beta))
        throw std::domain_error("inverse-Gamma scale must be finite and > 0, got " +
                                std::to_string(beta));
}

double checked_observation(double y)
{
    if (!(y >= 0.0) || !std::isfinite(y))
        throw std::domain_error("intensity must be finite and >= 0, got " + std::to_string(y));
    return y;
}

// log B(L, alpha)
double log_beta(double looks, double alpha)
{
    using boost::math::lgamma;
    return lgamma(looks) + lgamma(alpha) - lgamma(looks + alpha);
}

} // namespace

LookCount::LookCount(int looks) : looks_(looks)
{
    if (looks < 1)
        throw std::invalid_argument("number of looks must be >= 1, got " + std::to_string(looks));
}

InvGammaParams::InvGammaParams(Raster<double> a, Raster<double> b)
    : alpha(std::move(a)), beta(std::move(b))
{
    require_same_shape(alpha, beta, "InvGammaParams");
}

InvGammaParams InvGammaParams::uniform(int height, int width, double a, double b)
{
    return {Raster<double>(height, width, a), Raster<double>(height, width, b)};
}

void InvGammaParams::validate() const
{
    require_same_shape(alpha, beta, "InvGammaParams");
    for (std::size_t i = 0; i < alpha.size(); ++i)
        check_prior(alpha[i], beta[i]);
}

IntensityImage sample_speckle(int height, int width, LookCount looks, std::uint64_t seed)
{
    if (height < 1 || width < 1)
        throw std::invalid_argument("speckle field dimensions must be positive");
    IntensityImage out(height, width);
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> gamma(looks.real(), 1.0 / looks.real());
    for (auto& v : out.values())
        v = gamma(rng);
    return out;
}

IntensityImage apply_speckle(const IntensityImage& clean, const IntensityImage& speckle)
{
    require_same_shape(clean, speckle, "apply_speckle");
    IntensityImage out(clean.height(), clean.width());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = clean[i] * speckle[i];
    return out;
}

PosteriorParams posterior_update(const InvGammaParams& prior, const IntensityImage& y,
                                 LookCount looks)
{
    require_same_shape(prior.alpha, y, "posterior_update");
    prior.validate();
    const double L = looks.real();
    PosteriorParams post{Raster<double>(y.height(), y.width()),
                         Raster<double>(y.height(), y.width())};
    for (std::size_t i = 0; i < y.size(); ++i) {
        post.shape[i] = L + prior.alpha[i];
        post.scale[i] = prior.beta[i] + L * checked_observation(y[i]);
    }
    return post;
}

double neg_log_likelihood(double alpha, double beta, double y, LookCount looks)
{
    check_prior(alpha, beta);
    const double obs = std::max(checked_observation(y), kIntensityFloor);
    const double L = looks.real();
    const double log_p = L * std::log(L) + (L - 1.0) * std::log(obs) + alpha * std::log(beta) -
                         log_beta(L, alpha) - (L + alpha) * std::log(beta + L * obs);
    return -log_p;
}

NllGradient neg_log_likelihood_gradient(double alpha, double beta, double y, LookCount looks)
{
    check_prior(alpha, beta);
    const double raw = checked_observation(y);
    const bool clamped = raw < kIntensityFloor;
    const double obs = clamped ? kIntensityFloor : raw;
    const double L = looks.real();
    const double denom = beta + L * obs;

    NllGradient g;
    g.value = -(L * std::log(L) + (L - 1.0) * std::log(obs) + alpha * std::log(beta) -
                log_beta(L, alpha) - (L + alpha) * std::log(denom));
    g.d_alpha = -std::log(beta) + boost::math::digamma(alpha) -
                boost::math::digamma(L + alpha) + std::log(denom);
    g.d_beta = -alpha / beta + (L + alpha) / denom;
    g.d_y = clamped ? 0.0 : -(L - 1.0) / obs + (L + alpha) * L / denom;
    return g;
}

Raster<double> neg_log_likelihood(const InvGammaParams& prior, const IntensityImage& y,
                                  LookCount looks)
{
    require_same_shape(prior.alpha, y, "neg_log_likelihood");
    require_same_shape(prior.alpha, prior.beta, "neg_log_likelihood");
    Raster<double> out(y.height(), y.width());
    for (std::size_t i = 0; i < y.size(); ++i)
        out[i] = neg_log_likelihood(prior.alpha[i], prior.beta[i], y[i], looks);
    return out;
}

double nll_loss(const InvGammaParams& prior, const IntensityImage& y, LookCount looks)
{
    const auto per_pixel = neg_log_likelihood(prior, y, looks);
    double sum = 0.0;
    for (double v : per_pixel.values())
        sum += v;
    return sum / static_cast<double>(per_pixel.size());
}

NllLoss nll_loss_with_gradient(const InvGammaParams& prior, const IntensityImage& y,
                               LookCount looks)
{
    require_same_shape(prior.alpha, y, "nll_loss");
    require_same_shape(prior.alpha, prior.beta, "nll_loss");
    const double inv_n = 1.0 / static_cast<double>(y.size());
    NllLoss loss{0.0, Raster<double>(y.height(), y.width()), Raster<double>(y.height(), y.width())};
    for (std::size_t i = 0; i < y.size(); ++i) {
        const auto g = neg_log_likelihood_gradient(prior.alpha[i], prior.beta[i], y[i], looks);
        loss.value += g.value;
        loss.d_alpha[i] = g.d_alpha * inv_n;
        loss.d_beta[i] = g.d_beta * inv_n;
    }
    loss.value *= inv_n;
    return loss;
}

double mmse_estimate(double alpha, double beta, double y, LookCount looks)
{
    check_prior(alpha, beta);
    const double L = looks.real();
    return (beta + L * checked_observation(y)) / (L + alpha - 1.0);
}

IntensityImage mmse_estimate(const InvGammaParams& prior, const IntensityImage& y,
                             LookCount looks)
{
    require_same_shape(prior.alpha, y, "mmse_estimate");
    require_same_shape(prior.alpha, prior.beta, "mmse_estimate");
    IntensityImage out(y.height(), y.width());
    for (std::size_t i = 0; i < y.size(); ++i)
        out[i] = mmse_estimate(prior.alpha[i], prior.beta[i], y[i], looks);
    return out;
}

} // namespace despeckle
