#include <cmath>
#include <numeric>
#include <random>

#include <doctest.h>

#include "despeckle/speckle_model.hpp"
#include "oracles.hpp"

using namespace despeckle;

namespace {

std::pair<double, double> moments(const IntensityImage& img)
{
    double s = 0.0;
    for (double v : img.values())
        s += v;
    const double mean = s / static_cast<double>(img.size());
    double ss = 0.0;
    for (double v : img.values())
        ss += (v - mean) * (v - mean);
    return {mean, ss / static_cast<double>(img.size())};
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

} // namespace

TEST_CASE("look count rejects non-positive values")
{
    CHECK_THROWS_AS(LookCount(0), std::invalid_argument);
    CHECK_THROWS_AS(LookCount(-3), std::invalid_argument);
    CHECK(LookCount(4).value() == 4);
}

TEST_CASE("sample_speckle is seeded and has Gamma(L, L) moments")
{
    SUBCASE("determinism")
    {
        const auto a = sample_speckle(64, 64, LookCount(1), 7);
        const auto b = sample_speckle(64, 64, LookCount(1), 7);
        CHECK(a == b);
        CHECK_FALSE(a == sample_speckle(64, 64, LookCount(1), 8));
    }
    SUBCASE("single look")
    {
        const auto [mean, var] = moments(sample_speckle(1000, 1000, LookCount(1), 3));
        CHECK(std::abs(mean - 1.0) < 0.01);
        CHECK(std::abs(var - 1.0) < 0.03);
    }
    SUBCASE("four looks")
    {
        const auto [mean, var] = moments(sample_speckle(1000, 1000, LookCount(4), 3));
        CHECK(std::abs(mean - 1.0) < 0.01);
        CHECK(std::abs(var - 0.25) < 0.03 * 0.25);
    }
    SUBCASE("argument errors")
    {
        CHECK_THROWS_AS(sample_speckle(0, 4, LookCount(1), 1), std::invalid_argument);
        CHECK_THROWS_AS(sample_speckle(4, -1, LookCount(1), 1), std::invalid_argument);
    }
}

TEST_CASE("apply_speckle is an elementwise product")
{
    const auto s = sample_speckle(8, 9, LookCount(1), 11);
    CHECK(apply_speckle(IntensityImage(8, 9, 1.0), s) == s);
    IntensityImage clean(8, 9);
    for (std::size_t i = 0; i < clean.size(); ++i)
        clean[i] = static_cast<double>(i % 7);
    CHECK(apply_speckle(clean, IntensityImage(8, 9, 1.0)) == clean);

    IntensityImage c(1, 2, 2.0), n(1, 2, 0.5);
    c(0, 1) = 0.0;
    const auto y = apply_speckle(c, n);
    CHECK(y(0, 0) == 1.0);
    CHECK(y(0, 1) == 0.0);
    CHECK_THROWS_AS(apply_speckle(c, IntensityImage(2, 1, 1.0)), std::invalid_argument);
}

TEST_CASE("posterior_update follows the conjugate update")
{
    auto one = [](double a, double b, double y, int L) {
        const auto post = posterior_update(InvGammaParams::uniform(1, 1, a, b),
                                           IntensityImage(1, 1, y), LookCount(L));
        return std::pair{post.shape[0], post.scale[0]};
    };
    CHECK(one(1, 1, 1, 1) == std::pair{2.0, 2.0});
    CHECK(one(3, 4, 2, 2) == std::pair{5.0, 8.0});
    CHECK(one(0.7, 2.5, 0.0, 3) == std::pair{3.7, 2.5});
    CHECK_THROWS_AS(one(0.0, 1, 1, 1), std::domain_error);
    CHECK_THROWS_AS(one(1, -1, 1, 1), std::domain_error);
    CHECK_THROWS_AS(one(1, 1, -0.5, 1), std::domain_error);
}

TEST_CASE("neg_log_likelihood agrees with quadrature of the joint density")
{
    SUBCASE("alpha = beta = y = L = 1 gives ln 4")
    {
        CHECK(oracle::log_marginal_quadrature(1, 1, 1, 1) == doctest::Approx(-std::log(4.0)).epsilon(1e-9));
        CHECK(neg_log_likelihood(1, 1, 1, LookCount(1)) == doctest::Approx(1.3862943611198906).epsilon(1e-12));
    }
    SUBCASE("off-grid point")
    {
        const double q = std::exp(oracle::log_marginal_quadrature(2, 3, 0.7, 4));
        const double p = std::exp(-neg_log_likelihood(2, 3, 0.7, LookCount(4)));
        CHECK(rel_err(p, q) < 1e-5);
    }
    SUBCASE("large shape stays finite")
    {
        const double v = neg_log_likelihood(500.0, 250.0, 0.4, LookCount(1));
        CHECK(std::isfinite(v));
        const double q = oracle::log_marginal_quadrature(500.0, 250.0, 0.4, 1.0);
        CHECK(std::abs(-v - q) < 1e-5);
    }
    SUBCASE("tail monotonicity")
    {
        double prev = neg_log_likelihood(1, 1, 0.05, LookCount(1));
        for (double y = 0.1; y < 1e4; y *= 1.3) {
            const double v = neg_log_likelihood(1, 1, y, LookCount(1));
            CHECK(v > prev);
            prev = v;
        }
    }
    SUBCASE("zero observations are clamped to the floor")
    {
        CHECK(neg_log_likelihood(2, 1, 0.0, LookCount(3)) ==
              neg_log_likelihood(2, 1, kIntensityFloor, LookCount(3)));
        CHECK(std::isfinite(neg_log_likelihood(2, 1, 0.0, LookCount(3))));
        CHECK(neg_log_likelihood_gradient(2, 1, 0.0, LookCount(3)).d_y == 0.0);
    }
    SUBCASE("domain errors")
    {
        CHECK_THROWS_AS(neg_log_likelihood(0, 1, 1, LookCount(1)), std::domain_error);
        CHECK_THROWS_AS(neg_log_likelihood(1, 0, 1, LookCount(1)), std::domain_error);
        CHECK_THROWS_AS(neg_log_likelihood(NAN, 1, 1, LookCount(1)), std::domain_error);
        CHECK_THROWS_AS(neg_log_likelihood(1, 1, -1, LookCount(1)), std::domain_error);
    }
}

TEST_CASE("conjugacy property on a parameter grid")
{
    for (double a : {0.5, 1.0, 2.0, 5.0, 20.0})
        for (double b : {0.1, 1.0, 10.0})
            for (double y : {0.1, 1.0, 10.0})
                for (int L : {1, 4}) {
                    CAPTURE(a);
                    CAPTURE(b);
                    CAPTURE(y);
                    CAPTURE(L);
                    const double log_q = oracle::log_marginal_quadrature(a, b, y, L);
                    const double log_p = -neg_log_likelihood(a, b, y, LookCount(L));
                    CHECK(std::abs(std::expm1(log_p - log_q)) < 1e-5);
                }
}

TEST_CASE("nll_loss reduces by mean and has exact gradients")
{
    SUBCASE("single pixel")
    {
        CHECK(nll_loss(InvGammaParams::uniform(1, 1, 1, 1), IntensityImage(1, 1, 1.0), LookCount(1)) ==
              doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("duplicated pixels leave the mean unchanged")
    {
        InvGammaParams p1 = InvGammaParams::uniform(1, 3, 1, 1);
        IntensityImage y1(1, 3);
        p1.alpha[0] = 2.0; p1.alpha[1] = 0.8; p1.alpha[2] = 7.0;
        p1.beta[0] = 0.3; p1.beta[1] = 2.0; p1.beta[2] = 1.1;
        y1[0] = 0.2; y1[1] = 3.0; y1[2] = 0.9;
        InvGammaParams p2 = InvGammaParams::uniform(2, 3, 1, 1);
        IntensityImage y2(2, 3);
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) {
                p2.alpha(r, c) = p1.alpha[c];
                p2.beta(r, c) = p1.beta[c];
                y2(r, c) = y1[c];
            }
        CHECK(nll_loss(p2, y2, LookCount(2)) == doctest::Approx(nll_loss(p1, y1, LookCount(2))).epsilon(1e-14));
    }
    SUBCASE("gradient matches central differences")
    {
        std::mt19937_64 rng(1234);
        std::uniform_real_distribution<double> ua(0.3, 12.0), ub(0.05, 5.0), uy(0.01, 4.0);
        for (int L : {1, 3}) {
            InvGammaParams p = InvGammaParams::uniform(4, 5, 1, 1);
            IntensityImage y(4, 5);
            for (std::size_t i = 0; i < y.size(); ++i) {
                p.alpha[i] = ua(rng);
                p.beta[i] = ub(rng);
                y[i] = uy(rng);
            }
            const auto loss = nll_loss_with_gradient(p, y, LookCount(L));
            CHECK(loss.value == doctest::Approx(nll_loss(p, y, LookCount(L))).epsilon(1e-14));
            for (std::size_t i = 0; i < y.size(); ++i) {
                for (int which = 0; which < 2; ++which) {
                    auto plus = p, minus = p;
                    double& v = which == 0 ? p.alpha[i] : p.beta[i];
                    const double h = 1e-5 * v;
                    (which == 0 ? plus.alpha[i] : plus.beta[i]) = v + h;
                    (which == 0 ? minus.alpha[i] : minus.beta[i]) = v - h;
                    const double fd = (nll_loss(plus, y, LookCount(L)) - nll_loss(minus, y, LookCount(L))) / (2 * h);
                    const double g = which == 0 ? loss.d_alpha[i] : loss.d_beta[i];
                    CAPTURE(i);
                    CAPTURE(which);
                    CHECK(std::abs(g - fd) <= 1e-4 * std::max(std::abs(fd), 1e-6));
                }
            }
        }
    }
    SUBCASE("derivative with respect to the observation")
    {
        const double a = 2.5, b = 0.7, y = 1.3, h = 1e-6;
        const auto g = neg_log_likelihood_gradient(a, b, y, LookCount(4));
        const double fd = (neg_log_likelihood(a, b, y + h, LookCount(4)) -
                           neg_log_likelihood(a, b, y - h, LookCount(4))) / (2 * h);
        CHECK(g.d_y == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("mmse_estimate is the posterior mean")
{
    CHECK(mmse_estimate(2, 1, 1, LookCount(1)) == doctest::Approx(1.0));
    CHECK(mmse_estimate(3, 4, 1, LookCount(2)) == doctest::Approx(1.5));
    SUBCASE("Monte-Carlo posterior mean")
    {
        const double a = 1.5, b = 2.0, y = 0.8;
        const double mc = oracle::inverse_gamma_sample_mean(1 + a, b + y, 1'000'000, 99);
        CHECK(rel_err(mmse_estimate(a, b, y, LookCount(1)), mc) < 0.01);
    }
    SUBCASE("convex combination of prior mean and observation")
    {
        std::mt19937_64 rng(5);
        std::uniform_real_distribution<double> ua(1.01, 30.0), ub(0.01, 10.0), uy(0.0, 10.0);
        for (int i = 0; i < 200; ++i) {
            const double a = ua(rng), b = ub(rng), y = uy(rng);
            const int L = 1 + i % 5;
            const double w = (a - 1.0) / (L + a - 1.0);
            CHECK(w > 0.0);
            CHECK(w < 1.0);
            const double expected = w * (b / (a - 1.0)) + (1.0 - w) * y;
            CHECK(mmse_estimate(a, b, y, LookCount(L)) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    SUBCASE("prior-dominance and data-dominance limits")
    {
        const double m = 0.37, y = 2.4;
        const double a = 1e6;
        CHECK(rel_err(mmse_estimate(a, (a - 1.0) * m, y, LookCount(1)), m) < 1e-3);
        CHECK(rel_err(mmse_estimate(2.0, 3.0, y, LookCount(1'000'000)), y) < 1e-3);
    }
    SUBCASE("positivity")
    {
        CHECK(mmse_estimate(0.01, 1e-3, 0.0, LookCount(1)) > 0.0);
        const auto maps = mmse_estimate(InvGammaParams::uniform(3, 3, 0.5, 0.2), IntensityImage(3, 3, 0.0), LookCount(1));
        for (double v : maps.values())
            CHECK(v > 0.0);
    }
}
