#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "despeckle/raster.hpp"
#include "despeckle/speckle_model.hpp"
#include "despeckle/trainer.hpp"

namespace despeckle {

inline constexpr double kPsnrCap = 300.0;
inline constexpr std::size_t kMinMaskPixels = 100;

/// 10 log10(peak^2 / MSE), capped at kPsnrCap for identical images.
double psnr(const IntensityImage& clean, const IntensityImage& estimate, double peak = 255.0);

struct EnlResult {
    double value = 0.0; ///< +inf when the region has zero variance
    bool degenerate = false;
};

/// mean^2 / population variance over the masked pixels. The mask must match
/// the image shape and select at least kMinMaskPixels pixels.
EnlResult enl(const IntensityImage& img, const RegionMask& mask);

struct RatioMoments {
    double mean = 0.0;
    double stddev = 0.0; ///< population standard deviation
};

/// Moments of noisy / estimate. Throws std::domain_error on a non-positive
/// estimate pixel.
RatioMoments ratio_moments(const IntensityImage& noisy, const IntensityImage& estimate);

/// Moments over the pixels of several image pairs taken together.
RatioMoments ratio_moments(const std::vector<IntensityImage>& noisy,
                           const std::vector<IntensityImage>& estimates);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<double> density; ///< per bin, normalized by count and bin width
};

Histogram ratio_histogram(const std::vector<IntensityImage>& noisy,
                          const std::vector<IntensityImage>& estimates, double lo, double hi,
                          int bins);

/// Gamma(L, L) probability density.
double speckle_density(double r, LookCount looks);

struct ImageMetrics {
    std::string name;
    std::optional<double> psnr_noisy;
    std::optional<double> psnr;
    std::optional<EnlResult> enl_noisy;
    std::optional<EnlResult> enl;
    RatioMoments ratio;
};

/// Metrics of one image; reference metrics only when a clean image is given.
ImageMetrics evaluate_image(const std::string& name, const IntensityImage& noisy,
                            const IntensityImage& estimate, const IntensityImage* clean,
                            const RegionMask* mask, double peak = 255.0);

struct MetricsReport {
    int looks = 1;
    double peak = 255.0;
    std::vector<ImageMetrics> images;
    RatioMoments global_ratio;
    Histogram ratio_hist;
    std::vector<EpochRecord> training;          ///< optional curve
    std::map<std::string, std::string> metadata; ///< checkpoint id, manifest id, ...
};

/// metrics.csv (deterministic), report_meta.json and SVG plots.
/// Returns the written paths.
std::vector<std::filesystem::path> emit_report(const MetricsReport& report,
                                               const std::filesystem::path& out_dir);

/// CSV text of the per-image table. Reference columns appear only when at
/// least one image has them.
std::string metrics_csv(const MetricsReport& report);

} // namespace despeckle
