#include "despeckle/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"

namespace despeckle {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// salts for derive_seed so the different random streams never coincide
constexpr std::uint64_t kShuffleSalt = 0x5348554646ull;
constexpr std::uint64_t kPatchSalt = 0x5041544348ull;
constexpr std::uint64_t kHoldOutSalt = 0x484f4c44ull;
constexpr std::uint64_t kValSalt = 0x56414cull;

std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int grid_count(int extent, int patch, int stride) { return (extent - patch) / stride + 1; }

std::vector<float> to_float(const NoisyBatch& batch)
{
    const auto& patches = batch.noisy.patches;
    std::vector<float> out;
    out.reserve(patches.size() * patches.front().size());
    for (const auto& p : patches)
        for (double v : p.values())
            out.push_back(static_cast<float>(v));
    return out;
}

fs::path checkpoint_path(const fs::path& dir, int epoch)
{
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_epoch_%04d.ckpt", epoch);
    return dir / name;
}

} // namespace

void TrainConfig::validate() const
{
    if (epochs < 0)
        throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1)
        throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw std::invalid_argument("learning_rate must be finite and >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        throw std::invalid_argument("Adam moment constants must lie in [0, 1)");
    if (!(adam_eps > 0.0))
        throw std::invalid_argument("adam_eps must be > 0");
    if (!(clip_norm >= 0.0))
        throw std::invalid_argument("clip_norm must be >= 0");
    if (looks < 1)
        throw std::invalid_argument("looks must be >= 1");
    if (checkpoint_every < 0)
        throw std::invalid_argument("checkpoint_every must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
        throw std::invalid_argument("validation_fraction must lie in [0, 1)");
    if (patch_size < 2 || stride < 1)
        throw std::invalid_argument("patch_size must be >= 2 and stride >= 1");
}

TrainConfig train_config_from_json(const std::string& text)
{
    TrainConfig cfg;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed training config: ") + e.what());
    }
    if (!j.is_object())
        throw std::invalid_argument("training config must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "epochs") cfg.epochs = value.get<int>();
            else if (key == "batch_size") cfg.batch_size = value.get<int>();
            else if (key == "learning_rate") cfg.learning_rate = value.get<double>();
            else if (key == "adam_beta1") cfg.adam_beta1 = value.get<double>();
            else if (key == "adam_beta2") cfg.adam_beta2 = value.get<double>();
            else if (key == "adam_eps") cfg.adam_eps = value.get<double>();
            else if (key == "clip_norm") cfg.clip_norm = value.get<double>();
            else if (key == "looks") cfg.looks = value.get<int>();
            else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
            else if (key == "checkpoint_every") cfg.checkpoint_every = value.get<int>();
            else if (key == "validation_fraction") cfg.validation_fraction = value.get<double>();
            else if (key == "patch_size") cfg.patch_size = value.get<int>();
            else if (key == "stride") cfg.stride = value.get<int>();
            else if (key == "augment") cfg.augment = value.get<bool>();
            else throw std::invalid_argument("unknown training config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("bad training config value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string to_json(const TrainConfig& cfg)
{
    const json j{{"epochs", cfg.epochs},
                 {"batch_size", cfg.batch_size},
                 {"learning_rate", cfg.learning_rate},
                 {"adam_beta1", cfg.adam_beta1},
                 {"adam_beta2", cfg.adam_beta2},
                 {"adam_eps", cfg.adam_eps},
                 {"clip_norm", cfg.clip_norm},
                 {"looks", cfg.looks},
                 {"seed", cfg.seed},
                 {"checkpoint_every", cfg.checkpoint_every},
                 {"validation_fraction", cfg.validation_fraction},
                 {"patch_size", cfg.patch_size},
                 {"stride", cfg.stride},
                 {"augment", cfg.augment}};
    return j.dump();
}

StepResult train_step(BlindSpotNet& net, AdamState& adam, const NoisyBatch& batch,
                      const TrainConfig& cfg)
{
    const auto& patches = batch.noisy.patches;
    if (patches.empty())
        throw std::invalid_argument("empty training batch");
    const int h = patches.front().height(), w = patches.front().width();
    for (const auto& p : patches)
        if (p.height() != h || p.width() != w)
            throw std::invalid_argument("training batch patches differ in size");
    const int n = static_cast<int>(patches.size());
    const auto input = to_float(batch);

    ForwardCache cache;
    const auto pred = net.forward(input, n, h, w, Mode::train, &cache);

    const std::size_t count = input.size();
    std::vector<float> d_alpha(count), d_beta(count);
    double loss = 0.0;
    std::size_t i = 0;
    for (const auto& p : patches)
        for (double y : p.values()) {
            if (!std::isfinite(pred.alpha[i]) || !std::isfinite(pred.beta[i]))
                throw NumericError("training diverged at step " +
                                   std::to_string(net.state().step + 1) +
                                   ": network produced non-finite prior parameters");
            const auto g = neg_log_likelihood_gradient(pred.alpha[i], pred.beta[i], y, batch.looks);
            loss += g.value;
            d_alpha[i] = static_cast<float>(g.d_alpha / static_cast<double>(count));
            d_beta[i] = static_cast<float>(g.d_beta / static_cast<double>(count));
            ++i;
        }
    loss /= static_cast<double>(count);
    if (!std::isfinite(loss))
        throw NumericError("training diverged at step " + std::to_string(net.state().step + 1) +
                           ": batch loss is " + fmt(loss));

    net.zero_grad();
    net.backward(cache, d_alpha, d_beta);
    const auto grads = net.gradients();
    double sq = 0.0;
    for (float g : grads)
        sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw NumericError("training diverged at step " + std::to_string(net.state().step + 1) +
                           ": gradient norm is " + fmt(norm) + " (loss " + fmt(loss) + ")");
    const double scale = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    auto params = net.parameters();
    if (adam.m.size() != params.size()) {
        adam.m.assign(params.size(), 0.0f);
        adam.v.assign(params.size(), 0.0f);
        adam.t = 0;
    }
    ++adam.t;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
    const auto lr = static_cast<float>(cfg.learning_rate);
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double g = grads[k] * scale;
        adam.m[k] = static_cast<float>(b1 * adam.m[k] + (1.0 - b1) * g);
        adam.v[k] = static_cast<float>(b2 * adam.v[k] + (1.0 - b2) * g * g);
        const double update = (adam.m[k] / c1) / (std::sqrt(adam.v[k] / c2) + cfg.adam_eps);
        params[k] -= lr * static_cast<float>(update);
    }
    ++net.state().step;
    return {loss, norm};
}

double validate(const PriorModel& model, const NoisyBatch& batch)
{
    if (batch.noisy.patches.empty())
        throw DataError("validation set is empty");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& p : batch.noisy.patches) {
        const auto nll = neg_log_likelihood(model.predict(p), p, batch.looks);
        for (double v : nll.values())
            sum += v;
        count += nll.size();
    }
    return sum / static_cast<double>(count);
}

void append_train_log(const fs::path& path, const std::vector<EpochRecord>& records)
{
    const bool fresh = !fs::exists(path);
    std::ofstream out(path, std::ios::app);
    auto timing_path = path;
    timing_path.replace_filename(path.stem().string() + "_timing.csv");
    const bool fresh_timing = !fs::exists(timing_path);
    std::ofstream timing(timing_path, std::ios::app);
    if (!out || !timing)
        throw DataError("cannot write training log " + path.string());
    if (fresh)
        out << "epoch,step,train_nll,val_nll\n";
    if (fresh_timing)
        timing << "epoch,wall_seconds\n";
    for (const auto& r : records) {
        out << r.epoch << ',' << r.step << ',' << fmt(r.train_nll) << ','
            << (r.val_nll ? fmt(*r.val_nll) : std::string{}) << '\n';
        timing << r.epoch << ',' << fmt(r.wall_seconds) << '\n';
    }
}

std::vector<EpochRecord> read_train_log(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open training log " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "epoch,step,train_nll,val_nll")
        throw DataError("unexpected training log header in " + path.string());
    std::vector<EpochRecord> out;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');)
            f.push_back(cell);
        if (f.size() == 3)
            f.emplace_back();
        if (f.size() != 4)
            throw DataError("malformed training log row: " + line);
        try {
            EpochRecord r;
            r.epoch = std::stoi(f[0]);
            r.step = std::stoll(f[1]);
            r.train_nll = std::stod(f[2]);
            if (!f[3].empty())
                r.val_nll = std::stod(f[3]);
            out.push_back(r);
        } catch (const std::exception&) {
            throw DataError("malformed training log row: " + line);
        }
    }
    return out;
}

TrainingSet::TrainingSet(const DatasetManifest& manifest, const TrainConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    manifest.validate();
    auto load = [&](const ManifestEntry& e) {
        if (e.domain == Domain::real && !manifest.whitened)
            throw DataError("real-domain entry " + e.path.string() +
                            " requires a manifest attesting whitened inputs");
        if (e.looks != cfg_.looks)
            throw DataError("entry " + e.path.string() + " has L=" + std::to_string(e.looks) +
                            " but training uses L=" + std::to_string(cfg_.looks));
        auto img = normalize(load_image(e.path), manifest.normalization);
        if (img.height() < cfg_.patch_size || img.width() < cfg_.patch_size)
            throw DataError("image " + e.path.string() + " is smaller than the training patch");
        return img;
    };
    for (const auto* e : manifest.with_role(Role::train))
        images_.push_back(load(*e));
    for (const auto* e : manifest.with_role(Role::val))
        val_images_.push_back(load(*e));
    if (images_.empty())
        throw DataError("manifest has no training entries");

    // hold out grid cells only when there is no explicit validation role
    std::vector<std::pair<std::size_t, std::size_t>> cells;
    for (std::size_t i = 0; i < images_.size(); ++i) {
        const std::size_t n =
            static_cast<std::size_t>(grid_count(images_[i].height(), cfg_.patch_size, cfg_.stride)) *
            grid_count(images_[i].width(), cfg_.patch_size, cfg_.stride);
        held_out_.emplace_back(n, false);
        for (std::size_t k = 0; k < n; ++k)
            cells.emplace_back(i, k);
    }
    if (val_images_.empty() && cfg_.validation_fraction > 0.0) {
        std::mt19937_64 rng(derive_seed(cfg_.seed, kHoldOutSalt));
        std::shuffle(cells.begin(), cells.end(), rng);
        auto held = static_cast<std::size_t>(
            std::ceil(cfg_.validation_fraction * static_cast<double>(cells.size())));
        held = std::min(held, cells.size() - 1);
        for (std::size_t k = 0; k < held; ++k)
            held_out_[cells[k].first][cells[k].second] = true;
    }
}

std::size_t TrainingSet::train_patch_count() const
{
    std::size_t n = 0;
    for (const auto& cells : held_out_)
        n += static_cast<std::size_t>(std::count(cells.begin(), cells.end(), false));
    return n;
}

EpochData TrainingSet::epoch(int epoch) const
{
    const LookCount looks(cfg_.looks);
    EpochData out{{looks, {}}, {looks, {}}};
    out.train.noisy.patch_size = out.val.noisy.patch_size = cfg_.patch_size;
    const auto e = static_cast<std::uint64_t>(epoch);
    for (std::size_t i = 0; i < images_.size(); ++i) {
        auto batch = extract_patches(images_[i], cfg_.patch_size, cfg_.stride, cfg_.augment,
                                     derive_seed(cfg_.seed, kPatchSalt + e, i), static_cast<int>(i));
        for (std::size_t k = 0; k < batch.size(); ++k) {
            if (held_out_[i][k])
                continue;
            out.train.noisy.patches.push_back(std::move(batch.patches[k]));
            out.train.noisy.origins.push_back(batch.origins[k]);
        }
    }
    auto& tp = out.train.noisy;
    std::vector<std::size_t> order(tp.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg_.seed, kShuffleSalt, e));
    std::shuffle(order.begin(), order.end(), rng);
    PatchBatch shuffled;
    shuffled.patch_size = tp.patch_size;
    for (auto k : order) {
        shuffled.patches.push_back(std::move(tp.patches[k]));
        shuffled.origins.push_back(tp.origins[k]);
    }
    tp = std::move(shuffled);

    auto& vp = out.val.noisy;
    if (!val_images_.empty()) {
        for (std::size_t i = 0; i < val_images_.size(); ++i) {
            auto batch = extract_patches(val_images_[i], cfg_.patch_size, cfg_.stride, false,
                                         derive_seed(cfg_.seed, kValSalt, i), static_cast<int>(i));
            std::move(batch.patches.begin(), batch.patches.end(), std::back_inserter(vp.patches));
            vp.origins.insert(vp.origins.end(), batch.origins.begin(), batch.origins.end());
        }
    } else {
        for (std::size_t i = 0; i < images_.size(); ++i) {
            if (std::none_of(held_out_[i].begin(), held_out_[i].end(), [](bool b) { return b; }))
                continue;
            auto batch = extract_patches(images_[i], cfg_.patch_size, cfg_.stride, false,
                                         derive_seed(cfg_.seed, kValSalt, i), static_cast<int>(i));
            for (std::size_t k = 0; k < batch.size(); ++k)
                if (held_out_[i][k]) {
                    vp.patches.push_back(std::move(batch.patches[k]));
                    vp.origins.push_back(batch.origins[k]);
                }
        }
    }
    return out;
}

TrainLog train(BlindSpotNet& net, const DatasetManifest& manifest, const TrainConfig& cfg,
               const TrainOptions& options)
{
    cfg.validate();
    const TrainingSet data(manifest, cfg);
    AdamState adam;
    int start_epoch = 1;
    if (options.resume_from) {
        auto ckpt = read_checkpoint(*options.resume_from);
        if (!(ckpt.net.config == net.config()))
            throw DataError("checkpoint network configuration differs from the requested one");
        const auto& meta = ckpt.net.metadata;
        const auto epoch_it = meta.find("epoch");
        if (epoch_it == meta.end() || !ckpt.extras.count("adam_m") || !ckpt.extras.count("adam_v"))
            throw DataError("checkpoint " + options.resume_from->string() +
                            " carries no optimizer state to resume from");
        start_epoch = std::stoi(epoch_it->second) + 1;
        adam.m = ckpt.extras.at("adam_m");
        adam.v = ckpt.extras.at("adam_v");
        adam.t = std::stoll(meta.at("adam_t"));
        net = BlindSpotNet(std::move(ckpt.net));
    }
    auto& meta = net.state().metadata;
    meta["normalization"] = manifest.normalization.id();
    meta["manifest_id"] = manifest.id();
    meta["looks"] = std::to_string(cfg.looks);
    meta["train_config"] = to_json(cfg);

    if (!options.out_dir.empty())
        fs::create_directories(options.out_dir);

    TrainLog log;
    for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto batches = data.epoch(epoch);
        const auto& patches = batches.train.noisy.patches;
        double weighted = 0.0;
        for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            const auto e = std::min(patches.size(), b + static_cast<std::size_t>(cfg.batch_size));
            NoisyBatch batch{batches.train.looks, {}};
            batch.noisy.patch_size = cfg.patch_size;
            batch.noisy.patches.assign(patches.begin() + static_cast<std::ptrdiff_t>(b),
                                       patches.begin() + static_cast<std::ptrdiff_t>(e));
            try {
                weighted += train_step(net, adam, batch, cfg).loss * static_cast<double>(e - b);
            } catch (const NumericError& err) {
                throw NumericError(std::string(err.what()) + " in epoch " + std::to_string(epoch));
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.step = net.state().step;
        rec.train_nll = weighted / static_cast<double>(patches.size());
        if (!batches.val.noisy.patches.empty())
            rec.val_nll = validate(net, batches.val);
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(rec);
        meta["epoch"] = std::to_string(epoch);
        meta["adam_t"] = std::to_string(adam.t);

        if (!options.out_dir.empty()) {
            append_train_log(options.out_dir / "train_log.csv", {rec});
            const std::map<std::string, std::vector<float>> extras{{"adam_m", adam.m},
                                                                   {"adam_v", adam.v}};
            if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
                save_checkpoint(net.state(), checkpoint_path(options.out_dir, epoch), extras);
            save_checkpoint(net.state(), options.out_dir / "checkpoint_latest.ckpt", extras);
        }
        if (options.on_epoch)
            options.on_epoch(rec);
    }
    return log;
}

} // namespace despeckle
