#pragma once

#include "despeckle/raster.hpp"
#include "despeckle/speckle_model.hpp"

namespace despeckle {

/// Anything that maps a noisy image to per-pixel inverse-Gamma prior
/// parameters, where the value at pixel i does not depend on input pixel i.
class PriorModel {
public:
    virtual ~PriorModel() = default;

    /// Deterministic (evaluation-mode) prediction.
    virtual InvGammaParams predict(const IntensityImage& noisy) const = 0;

    /// Chebyshev radius of the receptive field; outputs further than this
    /// from a pixel do not depend on it.
    virtual int receptive_radius() const = 0;
};

/// Returns the same (alpha, beta) at every pixel.
class ConstantPrior final : public PriorModel {
public:
    ConstantPrior(double alpha, double beta);
    InvGammaParams predict(const IntensityImage& noisy) const override;
    int receptive_radius() const override { return 0; }

private:
    double alpha_;
    double beta_;
};

} // namespace despeckle
