#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/data_pipeline.hpp"
#include "despeckle/prior_model.hpp"

namespace despeckle {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 16;
    double learning_rate = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 10.0; ///< global gradient norm bound, 0 disables
    int looks = 1;
    std::uint64_t seed = 0;
    int checkpoint_every = 1; ///< in epochs, 0 disables periodic checkpoints
    double validation_fraction = 0.05;
    int patch_size = 64;
    int stride = 64;
    bool augment = true;

    /// Throws std::invalid_argument. A zero learning rate is accepted.
    void validate() const;
};

/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const std::string& text);
std::string to_json(const TrainConfig& cfg);

struct AdamState {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
};

struct StepResult {
    double loss = 0.0;      ///< mean NLL over the batch pixels, before the update
    double grad_norm = 0.0; ///< before clipping
};

/// One optimizer step on a batch of noisy patches. Throws NumericError when
/// the loss or the gradient is not finite; the weights are left untouched then.
StepResult train_step(BlindSpotNet& net, AdamState& adam, const NoisyBatch& batch,
                      const TrainConfig& cfg);

/// Mean NLL over all pixels of the batch with the model in inference mode.
/// Throws DataError on an empty batch.
double validate(const PriorModel& model, const NoisyBatch& batch);

struct EpochRecord {
    int epoch = 0;
    std::int64_t step = 0;
    double train_nll = 0.0;
    std::optional<double> val_nll;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
};

/// Appends one row per record to `path`, writing the header when the file is
/// new. Wall time goes to a separate `<stem>_timing.csv` so the main log is
/// reproducible byte for byte.
void append_train_log(const std::filesystem::path& path, const std::vector<EpochRecord>& records);
/// Reads a log written by append_train_log (wall time is not restored).
std::vector<EpochRecord> read_train_log(const std::filesystem::path& path);

struct TrainOptions {
    std::filesystem::path out_dir;                    ///< checkpoints and log; empty for none
    std::optional<std::filesystem::path> resume_from; ///< checkpoint to continue from
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Patches of the training and validation split for one epoch. Validation
/// patches are the manifest's val entries when there are any, otherwise a
/// seeded fraction of the training grid cells that is held out of every epoch.
struct EpochData {
    NoisyBatch train;
    NoisyBatch val;
};

class TrainingSet {
public:
    /// Loads and normalizes the noisy training images. Throws DataError when
    /// real-domain entries lack the whitening attestation or look counts
    /// disagree with the config.
    TrainingSet(const DatasetManifest& manifest, const TrainConfig& cfg);

    /// Shuffled training patches of `epoch` and the fixed validation patches.
    EpochData epoch(int epoch) const;
    std::size_t image_count() const { return images_.size(); }
    std::size_t train_patch_count() const;

private:
    TrainConfig cfg_;
    std::vector<IntensityImage> images_;
    std::vector<IntensityImage> val_images_;
    std::vector<std::vector<bool>> held_out_; // per image, per grid cell
};

/// Runs cfg.epochs epochs (or the remainder when resuming). Checkpoints carry
/// the optimizer state and epoch so a resumed run continues identically.
TrainLog train(BlindSpotNet& net, const DatasetManifest& manifest, const TrainConfig& cfg,
               const TrainOptions& options = {});

} // namespace despeckle
