#include "despeckle/prior_model.hpp"

namespace despeckle {

ConstantPrior::ConstantPrior(double alpha, double beta) : alpha_(alpha), beta_(beta)
{
    InvGammaParams::uniform(1, 1, alpha, beta).validate();
}

InvGammaParams ConstantPrior::predict(const IntensityImage& noisy) const
{
    return InvGammaParams::uniform(noisy.height(), noisy.width(), alpha_, beta_);
}

} // namespace despeckle
