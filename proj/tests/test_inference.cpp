#include <cmath>
#include <random>

#include <doctest.h>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/errors.hpp"
#include "despeckle/inference.hpp"

using namespace despeckle;

namespace {

NetConfig toy_config()
{
    NetConfig c;
    c.depth = 3;
    c.width = 12;
    c.head_layers = 2;
    return c;
}

IntensityImage noisy_scene(int h, int w, std::uint64_t seed)
{
    IntensityImage clean(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            clean(r, c) = 0.3 + 0.2 * std::sin(0.2 * r) * std::cos(0.13 * c) + ((r / 20 + c / 20) % 2) * 0.4;
    return apply_speckle(clean, sample_speckle(h, w, LookCount(1), seed));
}

// a few steps in train mode so the running statistics are not trivial
BlindSpotNet warmed_net()
{
    auto net = build_network(toy_config(), 4);
    const auto img = noisy_scene(24, 24, 1);
    std::vector<float> in(img.values().begin(), img.values().end());
    for (int k = 0; k < 3; ++k)
        net.forward(in, 1, 24, 24, Mode::train);
    return net;
}

} // namespace

TEST_CASE("tile plans cover the image exactly once")
{
    for (auto [h, w] : {std::pair{128, 128}, std::pair{100, 37}, std::pair{300, 513}, std::pair{5, 5}}) {
        const TilingPlan plan{48, 8};
        std::vector<int> hits(static_cast<std::size_t>(h) * w, 0);
        for (const auto& t : plan_tiles(h, w, plan)) {
            CHECK(t.height <= plan.tile);
            CHECK(t.width <= plan.tile);
            CHECK(t.core_row >= t.row);
            CHECK(t.core_row + t.core_h <= t.row + t.height);
            for (int r = 0; r < t.core_h; ++r)
                for (int c = 0; c < t.core_w; ++c)
                    ++hits[static_cast<std::size_t>(t.core_row + r) * w + t.core_col + c];
            // the core is padded by the full overlap or up to the image border
            CHECK(t.core_row - t.row == std::min(plan.overlap, t.core_row));
            CHECK(t.col + t.width - (t.core_col + t.core_w) ==
                  std::min(plan.overlap, w - (t.core_col + t.core_w)));
        }
        for (int v : hits)
            REQUIRE(v == 1);
    }
}

TEST_CASE("plan validation against the receptive field")
{
    CHECK_NOTHROW((TilingPlan{256, 32}.validate(17)));
    CHECK_THROWS_AS((TilingPlan{256, 17}.validate(17)), std::invalid_argument);
    CHECK_THROWS_AS((TilingPlan{64, 32}.validate(8)), std::invalid_argument);
    const auto net = warmed_net();
    CHECK_THROWS_AS(despeckle_image(net, noisy_scene(40, 40, 2), LookCount(1), TilingPlan{16, 3}),
                    std::invalid_argument);
}

TEST_CASE("tiled and whole-image despeckling agree")
{
    const auto net = warmed_net();
    const auto y = noisy_scene(128, 128, 3);
    const auto whole = despeckle_image(net, y, LookCount(1), TilingPlan{128, 4});
    const auto tiled = despeckle_image(net, y, LookCount(1), TilingPlan{40, 4});
    REQUIRE(plan_tiles(128, 128, TilingPlan{40, 4}).size() > 4);
    double worst = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        worst = std::max(worst, std::abs(whole.estimate[i] - tiled.estimate[i]));
    MESSAGE("max tiled/untiled difference " << worst);
    CHECK(worst <= 1e-5);
    for (double v : tiled.estimate.values())
        CHECK(v > 0.0);
}

TEST_CASE("constant prior reduces to the closed-form estimate")
{
    const double a0 = 2.5, b0 = 0.7;
    const ConstantPrior stub(a0, b0);
    for (int L : {1, 4}) {
        const auto y = noisy_scene(70, 90, 5);
        const auto res = despeckle_image(stub, y, LookCount(L), TilingPlan{32, 4});
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double expect = (b0 + L * y[i]) / (L + a0 - 1.0);
            REQUIRE(res.estimate[i] == doctest::Approx(expect).epsilon(1e-14));
            REQUIRE(res.params.alpha[i] == a0);
            REQUIRE(res.params.beta[i] == b0);
        }
    }
}

TEST_CASE("despeckling is deterministic and respects the normalization")
{
    const auto net = warmed_net();
    const auto y = noisy_scene(50, 60, 6);
    const auto a = despeckle_image(net, y, LookCount(1), TilingPlan{32, 4});
    const auto b = despeckle_image(net, y, LookCount(1), TilingPlan{32, 4});
    CHECK(a.estimate == b.estimate);
    CHECK(a.params.alpha == b.params.alpha);

    const auto norm = Normalization::fixed(255.0);
    const auto raw = denormalize(y, norm);
    const auto scaled = despeckle_image(net, raw, LookCount(1), TilingPlan{32, 4}, norm);
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(scaled.estimate[i] == doctest::Approx(a.estimate[i] * 255.0).epsilon(1e-6));

    NetState state = net.state();
    CHECK_THROWS_AS(trained_normalization(state), DataError);
    state.metadata["normalization"] = norm.id();
    CHECK(trained_normalization(state) == norm);
    const auto other = Normalization::fixed(100.0);
    CHECK_THROWS_AS(trained_normalization(state, &other), DataError);
}

TEST_CASE("pixel i depends on y_i only through the likelihood term")
{
    const auto net = warmed_net();
    auto y = noisy_scene(40, 40, 7);
    const auto base = despeckle_image(net, y, LookCount(1), TilingPlan{40, 4});
    std::mt19937 rng(3);
    std::uniform_int_distribution<int> pick(0, 39);
    for (int probe = 0; probe < 20; ++probe) {
        const int r = pick(rng), c = pick(rng);
        const double delta = 0.5;
        auto y2 = y;
        y2(r, c) += delta;
        const auto moved = despeckle_image(net, y2, LookCount(1), TilingPlan{40, 4});
        CHECK(moved.params.alpha(r, c) == base.params.alpha(r, c));
        CHECK(moved.params.beta(r, c) == base.params.beta(r, c));
        const double expect = delta / base.params.alpha(r, c); // L delta / (L + alpha - 1), L = 1
        CHECK(moved.estimate(r, c) - base.estimate(r, c) == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("invalid inputs are rejected")
{
    const ConstantPrior stub(2.0, 1.0);
    IntensityImage y(8, 8);
    y(3, 3) = -1.0;
    CHECK_THROWS_AS(despeckle_image(stub, y, LookCount(1), TilingPlan{}), std::domain_error);
}
