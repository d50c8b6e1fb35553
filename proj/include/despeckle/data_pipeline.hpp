#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "despeckle/raster.hpp"
#include "despeckle/speckle_model.hpp"

namespace despeckle {

enum class Role { train, val, test };
enum class Domain { synthetic, real };

std::string to_string(Role role);
std::string to_string(Domain domain);

/// Invertible intensity scaling: normalized = raw / scale.
struct Normalization {
    enum class Scheme { fixed_divisor, mean_divisor };
    Scheme scheme = Scheme::fixed_divisor;
    double scale = 255.0;

    static Normalization fixed(double divisor);
    /// Scale = mean intensity over all pixels of `images`.
    static Normalization dataset_mean(std::span<const IntensityImage> images);
    /// "fixed:255" / "mean:0.0123"; inverse of parse().
    std::string id() const;
    static Normalization parse(const std::string& id);
    friend bool operator==(const Normalization&, const Normalization&) = default;
};

IntensityImage normalize(const IntensityImage& img, const Normalization& norm);
IntensityImage denormalize(const IntensityImage& img, const Normalization& norm);

struct ManifestEntry {
    std::filesystem::path path; ///< noisy observation
    Role role = Role::train;
    Domain domain = Domain::synthetic;
    int looks = 1;
    std::optional<std::filesystem::path> clean; ///< synthetic only, metrics only
    std::optional<std::filesystem::path> mask;  ///< homogeneous region for ENL
};

struct DatasetManifest {
    static constexpr int kVersion = 1;
    std::vector<ManifestEntry> entries;
    Normalization normalization;
    std::uint64_t seed = 0;
    /// Attests that real-domain inputs were decorrelated upstream.
    bool whitened = false;

    /// Throws DataError on role overlap, bad look counts or clean references
    /// attached to real-domain entries.
    void validate() const;
    std::vector<const ManifestEntry*> with_role(Role role) const;
    /// Stable content hash of the serialized manifest.
    std::string id() const;
};

/// Relative paths in the file are resolved against its directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Paths are written relative to the manifest directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Top-left corner of a patch in its source image.
struct PatchOrigin {
    int source = 0;
    int row = 0;
    int col = 0;
    int transform = 0; ///< dihedral transform index 0..7 applied after cropping
};

/// Square crops of equal size.
struct PatchBatch {
    int patch_size = 0;
    std::vector<IntensityImage> patches;
    std::vector<PatchOrigin> origins;
    std::size_t size() const { return patches.size(); }
};

/// What the training loss is allowed to see: noisy patches only.
struct NoisyBatch {
    LookCount looks{1};
    PatchBatch noisy;
};

/// Synthetic pairs; the clean half is for evaluation only.
struct SyntheticPairs {
    LookCount looks{1};
    PatchBatch clean;
    PatchBatch noisy;
    NoisyBatch noisy_only() const { return {looks, noisy}; }
};

/// One of the 8 symmetries of the square: k quarter turns, then an optional
/// horizontal flip when index >= 4.
IntensityImage dihedral(const IntensityImage& img, int index);

/// Grid of patch x patch crops with the given stride. The grid is shifted by a
/// seeded random offset inside the slack left after the last full stride, so
/// the patch count depends only on the geometry. With `augment` each crop gets
/// a seeded uniformly random dihedral transform.
PatchBatch extract_patches(const IntensityImage& img, int patch, int stride, bool augment,
                           std::uint64_t seed, int source_index = 0);

/// noisy = clean * speckle with Gamma(L, L) speckle drawn per patch from `seed`.
SyntheticPairs make_synthetic_pairs(const PatchBatch& clean, LookCount looks, std::uint64_t seed);

/// Stateless seed derivation (splitmix64 over the inputs).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

/// Speckles every clean image, writes noisy raw arrays under out_dir/noisy and
/// a manifest at out_dir/manifest.json (fixed 255 normalization).
DatasetManifest simulate_dataset(const std::vector<std::filesystem::path>& train_clean,
                                 const std::vector<std::filesystem::path>& test_clean,
                                 LookCount looks, std::uint64_t seed,
                                 const std::filesystem::path& out_dir);

/// Sorted regular files with the given extensions.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

} // namespace despeckle
