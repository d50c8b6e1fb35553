#pragma once

#include <filesystem>

#include "despeckle/raster.hpp"

namespace despeckle {

// Supported on-disk formats:
//   8-bit grayscale PGM (binary P5 or ASCII P2), values mapped to [0, 255];
//   raw float array: ASCII header "DSPKRAW 1 <f32|f64> <height> <width>\n"
//   followed by height*width little-endian IEEE values, row-major.
// Colour rasters (PPM, P3/P6) are rejected with a DataError.

IntensityImage load_image(const std::filesystem::path& path);

/// Writes a float64 raw array; reloads bit-exactly.
void save_raw(const IntensityImage& img, const std::filesystem::path& path);

/// Rounds and clamps to [0, 255].
void save_pgm(const IntensityImage& img, const std::filesystem::path& path);

/// PGM or raw raster; nonzero pixels are selected.
RegionMask load_mask(const std::filesystem::path& path);
void save_mask(const RegionMask& mask, const std::filesystem::path& path);

/// Writes to a sibling temporary file then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

} // namespace despeckle
