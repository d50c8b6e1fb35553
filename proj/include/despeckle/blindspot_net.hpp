#pragma once

// Four-branch blind-spot convolutional network.
//
// One shared convolution stack is applied to the four 90-degree rotations of
// the input. Inside the stack every convolution is vertically causal: the
// first layer only reads its own row, later layers read their own row and
// the rows above. Shifting the stack output down by one row before rotating
// back therefore leaves each branch with a receptive field strictly inside
// one half-plane (up, right, down, left). The four branch feature maps are
// concatenated and merged by 1x1 convolutions into two channels that are
// mapped to (alpha, beta) by a clamped exponential plus a floor.
//
// With a 3x3 kernel and `depth` blocks the receptive field of pixel i is the
// (2 depth + 1)^2 square around i minus i itself.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "despeckle/prior_model.hpp"
#include "despeckle/raster.hpp"
#include "despeckle/speckle_model.hpp"

namespace despeckle {

struct NetConfig {
    int depth = 17;
    int width = 64;
    int kernel = 3;
    int head_layers = 3;
    double leaky_slope = 0.1;
    static constexpr int out_channels = 2;

    /// Throws std::invalid_argument.
    void validate() const;
    int receptive_radius() const { return depth * (kernel / 2); }
    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Positivity transform constants.
inline constexpr double kRawClamp = 20.0;
inline constexpr double kAlphaFloor = 1e-3;
inline constexpr double kBetaFloor = 1e-3;

/// Serializable network state.
struct NetState {
    NetConfig config;
    std::vector<float> params;  ///< trainable weights, layout fixed by config
    std::vector<float> buffers; ///< batch-norm running mean / variance
    std::int64_t step = 0;
    /// Free-form provenance (normalization constants, manifest id, ...).
    std::map<std::string, std::string> metadata;
};

enum class Mode { train, eval };

/// Per-layer storage kept by a forward pass for the backward pass.
struct ForwardCache {
    int batch = 0;
    int height = 0;
    int width = 0;
    Mode mode = Mode::eval;
    std::vector<float> input;                  ///< rotated inputs, 1 x (4N P)
    std::vector<std::vector<float>> pre_norm;  ///< per stack layer, C x (4N P)
    std::vector<std::vector<float>> mean;      ///< per stack layer, C
    std::vector<std::vector<float>> inv_std;   ///< per stack layer, C
    std::vector<std::vector<float>> head_in;   ///< per head layer, C_in x (N P)
    std::vector<float> raw;                    ///< 2 x (N P)
};

/// Output maps of a batched forward pass, each N x P (row-major per image).
struct BatchPrediction {
    int batch = 0;
    int height = 0;
    int width = 0;
    std::vector<float> alpha;
    std::vector<float> beta;
    std::vector<float> raw; ///< 2 x (N P), before the positivity transform
};

struct BackwardOptions {
    bool parameter_gradient = true;
    bool input_gradient = false;
    /// Branches (up, right, down, left) the gradient is propagated into.
    std::array<bool, 4> branches{true, true, true, true};
    /// Treat the incoming gradients as d/d(raw) instead of d/d(alpha), d/d(beta).
    bool gradient_wrt_raw = false;
};

struct SensitivityReport {
    int probe_size = 0;
    int center_row = 0;
    int center_col = 0;
    std::vector<std::pair<int, int>> footprint;                      ///< (row, col)
    std::array<std::vector<std::pair<int, int>>, 4> branch_footprint; ///< up, right, down, left
    bool center_excluded = false;
    bool branches_in_half_planes = false;
    bool union_matches = false;
    bool ok() const { return center_excluded && branches_in_half_planes && union_matches; }
};

class BlindSpotNet final : public PriorModel {
public:
    explicit BlindSpotNet(NetState state);

    const NetState& state() const noexcept { return state_; }
    NetState& state() noexcept { return state_; }
    const NetConfig& config() const noexcept { return state_.config; }

    std::size_t parameter_count() const noexcept { return state_.params.size(); }
    std::span<float> parameters() noexcept { return state_.params; }
    std::span<float> gradients() noexcept { return grads_; }
    std::span<const float> gradients() const noexcept { return grads_; }
    void zero_grad();

    /// Batched forward over N equally sized images stored back to back
    /// (N x H x W). Train mode uses batch statistics and updates the running
    /// averages. Pass a cache to enable backward().
    BatchPrediction forward(std::span<const float> images, int batch, int height, int width,
                            Mode mode, ForwardCache* cache = nullptr);

    /// Accumulates parameter gradients given d(loss)/d(alpha), d(loss)/d(beta)
    /// (or d/d(raw) per options). Returns d(loss)/d(input) when requested, N x P.
    std::vector<float> backward(const ForwardCache& cache, std::span<const float> d_alpha,
                                std::span<const float> d_beta,
                                const BackwardOptions& options = {});

    InvGammaParams forward(const IntensityImage& noisy, Mode mode);
    InvGammaParams predict(const IntensityImage& noisy) const override;
    int receptive_radius() const override { return state_.config.receptive_radius(); }

    /// Feature maps of one branch (0 up, 1 right, 2 down, 3 left) in input
    /// orientation, eval mode, C x H x W.
    std::vector<float> branch_features(const IntensityImage& noisy, int branch) const;

    /// Input positions of a probe_size^2 image that influence the prediction
    /// at its centre, found from exact input gradients in eval mode.
    SensitivityReport receptive_field_report(int probe_size) const;

private:
    struct ConvSpec {
        int in = 0;
        int out = 0;
        std::vector<std::pair<int, int>> taps; // (row, col) offsets
        std::size_t weight = 0;                // offset into params
        std::size_t bias = 0;                  // offset into params (head only)
    };
    struct NormSpec {
        std::size_t gamma = 0;
        std::size_t beta = 0;
        std::size_t running_mean = 0; // offset into buffers
        std::size_t running_var = 0;
    };
    struct Geometry;

    BlindSpotNet(const NetConfig& config, std::uint64_t seed);
    void build_layout();
    std::vector<float> backward_into(const ForwardCache& cache, std::span<const float> d_alpha,
                                     std::span<const float> d_beta,
                                     const BackwardOptions& options, float* grads) const;
    BatchPrediction run(std::span<const float> images, int batch, int height, int width,
                        Mode mode, ForwardCache* cache, std::vector<float>* running) const;

    NetState state_;
    std::vector<float> grads_;
    std::vector<ConvSpec> stack_;
    std::vector<NormSpec> norms_;
    std::vector<ConvSpec> head_;
    std::size_t param_count_ = 0;
    std::size_t buffer_count_ = 0;

    friend BlindSpotNet build_network(const NetConfig& config, std::uint64_t seed);
};

/// He-initialized network; identical seeds give identical weights.
BlindSpotNet build_network(const NetConfig& config, std::uint64_t seed);

/// Closed-form trainable parameter count for a configuration.
std::size_t parameter_count(const NetConfig& config);

/// Checkpoint container: magic, format version, JSON header (config, step,
/// metadata), weights, normalization buffers and optional named extra tensors.
void save_checkpoint(const NetState& net, const std::filesystem::path& path,
                     const std::map<std::string, std::vector<float>>& extras = {});

struct CheckpointData {
    NetState net;
    std::map<std::string, std::vector<float>> extras;
};

CheckpointData read_checkpoint(const std::filesystem::path& path);
NetState load_checkpoint(const std::filesystem::path& path);

} // namespace despeckle
