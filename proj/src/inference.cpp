#include "despeckle/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/errors.hpp"

namespace despeckle {

void TilingPlan::validate(int receptive_radius) const
{
    if (overlap <= receptive_radius)
        throw std::invalid_argument("tile overlap " + std::to_string(overlap) +
                                    " must exceed the receptive-field radius " +
                                    std::to_string(receptive_radius));
    if (tile <= 2 * overlap)
        throw std::invalid_argument("tile " + std::to_string(tile) +
                                    " leaves no centre crop with overlap " +
                                    std::to_string(overlap));
}

std::vector<TileWindow> plan_tiles(int height, int width, const TilingPlan& plan)
{
    const int core = plan.tile - 2 * plan.overlap;
    auto spans = [&](int extent) {
        std::vector<std::pair<int, int>> out; // (core start, core length)
        if (extent <= plan.tile) {
            out.emplace_back(0, extent);
            return out;
        }
        for (int s = 0; s < extent; s += core)
            out.emplace_back(s, std::min(core, extent - s));
        return out;
    };
    std::vector<TileWindow> tiles;
    for (const auto& [rs, rl] : spans(height))
        for (const auto& [cs, cl] : spans(width)) {
            TileWindow t;
            t.core_row = rs;
            t.core_col = cs;
            t.core_h = rl;
            t.core_w = cl;
            t.row = std::max(0, rs - plan.overlap);
            t.col = std::max(0, cs - plan.overlap);
            t.height = std::min(height, rs + rl + plan.overlap) - t.row;
            t.width = std::min(width, cs + cl + plan.overlap) - t.col;
            tiles.push_back(t);
        }
    return tiles;
}

DespeckleResult despeckle_image(const PriorModel& model, const IntensityImage& y, LookCount looks,
                          const TilingPlan& plan)
{
    plan.validate(model.receptive_radius());
    for (double v : y.values())
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::domain_error("input intensities must be finite and >= 0");
    const int H = y.height(), W = y.width();
    DespeckleResult out{IntensityImage(H, W), InvGammaParams::uniform(H, W, 1.0, 1.0)};
    for (const auto& t : plan_tiles(H, W, plan)) {
        const auto tile = y.crop(t.row, t.col, t.height, t.width);
        const auto prior = model.predict(tile);
        const auto est = mmse_estimate(prior, tile, looks);
        for (int r = 0; r < t.core_h; ++r)
            for (int c = 0; c < t.core_w; ++c) {
                const int tr = t.core_row - t.row + r, tc = t.core_col - t.col + c;
                const int R = t.core_row + r, C = t.core_col + c;
                out.estimate(R, C) = est(tr, tc);
                out.params.alpha(R, C) = prior.alpha(tr, tc);
                out.params.beta(R, C) = prior.beta(tr, tc);
            }
    }
    for (double v : out.estimate.values())
        if (!(v > 0.0) || !std::isfinite(v))
            throw NumericError("despeckled estimate is not strictly positive and finite");
    return out;
}

DespeckleResult despeckle_image(const PriorModel& model, const IntensityImage& y, LookCount looks,
                          const TilingPlan& plan, const Normalization& norm)
{
    auto res = despeckle_image(model, normalize(y, norm), looks, plan);
    res.estimate = denormalize(res.estimate, norm);
    return res;
}

Normalization trained_normalization(const NetState& net, const Normalization* expected)
{
    const auto it = net.metadata.find("normalization");
    if (it == net.metadata.end())
        throw DataError("checkpoint records no intensity normalization");
    const auto norm = Normalization::parse(it->second);
    if (expected && !(*expected == norm))
        throw DataError("normalization mismatch: network trained with " + norm.id() +
                        ", data uses " + expected->id());
    return norm;
}

} // namespace despeckle
