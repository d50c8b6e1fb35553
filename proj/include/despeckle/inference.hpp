#pragma once

#include "despeckle/data_pipeline.hpp"
#include "despeckle/prior_model.hpp"
#include "despeckle/speckle_model.hpp"

namespace despeckle {

struct NetState;

/// Square tiles whose centre crops (tile - 2 overlap) partition the image.
struct TilingPlan {
    int tile = 256;
    int overlap = 32;

    /// Throws std::invalid_argument unless overlap > radius and the centre
    /// crop is non-empty.
    void validate(int receptive_radius) const;
};

struct TileWindow {
    int row = 0, col = 0, height = 0, width = 0;      ///< input window
    int core_row = 0, core_col = 0, core_h = 0, core_w = 0; ///< written region
};

/// Deterministic tile order (row-major) covering a height x width image.
std::vector<TileWindow> plan_tiles(int height, int width, const TilingPlan& plan);

struct DespeckleResult {
    IntensityImage estimate;
    InvGammaParams params;
};

/// MMSE despeckling, tile by tile, with centre-crop stitching. Works in the
/// units of `y`; callers normalize beforehand and de-normalize the estimate.
DespeckleResult despeckle_image(const PriorModel& model, const IntensityImage& y, LookCount looks,
                          const TilingPlan& plan);

/// Same, on raw intensities: y is divided by the scale recorded with the
/// network and the estimate multiplied back. The alpha, beta maps stay in
/// normalized units.
DespeckleResult despeckle_image(const PriorModel& model, const IntensityImage& y, LookCount looks,
                          const TilingPlan& plan, const Normalization& norm);

/// Normalization recorded at training time. Throws DataError when it is
/// missing or, if `expected` is given, differs from it.
Normalization trained_normalization(const NetState& net, const Normalization* expected = nullptr);

} // namespace despeckle
