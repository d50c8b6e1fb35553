#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <doctest.h>

#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"
#include "despeckle/trainer.hpp"
#include "oracles.hpp"

using namespace despeckle;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const auto dir = fs::temp_directory_path() / ("despeckle_tr_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// piecewise smooth scene in [10, 245]
IntensityImage scene(int h, int w, int variant)
{
    IntensityImage img(h, w);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double v = 60.0 + 40.0 * std::sin(0.11 * r + 0.7 * variant) + 0.5 * c;
            if ((r / 16 + c / 16 + variant) % 3 == 0)
                v += 90.0;
            img(r, c) = std::clamp(v, 10.0, 245.0);
        }
    return img;
}

NoisyBatch noisy_patch(int size, std::uint64_t seed)
{
    const auto clean = normalize(scene(size, size, 0), Normalization::fixed(255.0));
    NoisyBatch b{LookCount(1), {}};
    b.noisy.patch_size = size;
    b.noisy.patches.push_back(apply_speckle(clean, sample_speckle(size, size, LookCount(1), seed)));
    b.noisy.origins.push_back({});
    return b;
}

NetConfig toy_config()
{
    NetConfig c;
    c.depth = 3;
    c.width = 12;
    c.head_layers = 2;
    return c;
}

DatasetManifest toy_manifest(const fs::path& dir, int images = 3)
{
    fs::create_directories(dir / "clean");
    std::vector<fs::path> files;
    for (int k = 0; k < images; ++k) {
        files.push_back(dir / "clean" / ("s" + std::to_string(k) + ".pgm"));
        save_pgm(scene(40, 48, k), files.back());
    }
    return simulate_dataset(files, {}, LookCount(1), 5, dir / "sim");
}

TrainConfig toy_train_config()
{
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.patch_size = 16;
    cfg.stride = 8;
    cfg.seed = 21;
    cfg.validation_fraction = 0.1;
    return cfg;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("training config parsing and validation")
{
    const auto cfg = train_config_from_json(R"({"epochs": 3, "learning_rate": 0.002, "seed": 9})");
    CHECK(cfg.epochs == 3);
    CHECK(cfg.learning_rate == 0.002);
    CHECK(cfg.batch_size == 16);
    CHECK(cfg.adam_beta1 == 0.9);
    CHECK(cfg.adam_beta2 == 0.999);
    CHECK(cfg.adam_eps == 1e-8);
    CHECK(cfg.clip_norm == 10.0);
    CHECK(train_config_from_json(to_json(cfg)).seed == 9);
    CHECK_THROWS_AS(train_config_from_json(R"({"batch_size": 0})"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"validation_fraction": 1.0})"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"learning_rate": -1})"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json(R"({"lr": 1})"), std::invalid_argument);
    CHECK_THROWS_AS(train_config_from_json("{"), std::invalid_argument);
}

TEST_CASE("overfitting one noisy patch lowers the NLL and beats a fresh net")
{
    const auto batch = noisy_patch(64, 3);
    auto net = build_network(toy_config(), 7);
    const auto fresh = net;
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    AdamState adam;
    const double first = train_step(net, adam, batch, cfg).loss;
    double last = first;
    for (int s = 1; s < 500; ++s)
        last = train_step(net, adam, batch, cfg).loss;
    MESSAGE("overfit NLL " << first << " -> " << last);
    CHECK(last <= first - 0.2 * std::abs(first));
    CHECK(net.state().step == 500);
    CHECK(validate(fresh, batch) > validate(net, batch));
}

TEST_CASE("zero learning rate leaves the weights bit-identical")
{
    const auto dir = scratch("zero_lr");
    const auto manifest = toy_manifest(dir);
    auto net = build_network(toy_config(), 3);
    const auto before = net.state().params;
    auto cfg = toy_train_config();
    cfg.epochs = 1;
    cfg.learning_rate = 0.0;
    const auto log = train(net, manifest, cfg);
    REQUIRE(log.epochs.size() == 1);
    CHECK(log.epochs[0].step > 0);
    CHECK(net.state().params == before);
}

TEST_CASE("resuming from a checkpoint continues like an uninterrupted run")
{
    const auto dir = scratch("resume");
    const auto manifest = toy_manifest(dir);
    const auto cfg = toy_train_config();

    auto full = build_network(toy_config(), 11);
    const auto log_full = train(full, manifest, cfg, {dir / "full", {}, {}});

    auto part = build_network(toy_config(), 11);
    auto first = cfg;
    first.epochs = 1;
    train(part, manifest, first, {dir / "part", {}, {}});
    auto resumed = build_network(toy_config(), 999);
    const auto log_rest =
        train(resumed, manifest, cfg, {dir / "part", dir / "part" / "checkpoint_epoch_0001.ckpt", {}});

    REQUIRE(log_full.epochs.size() == 2);
    REQUIRE(log_rest.epochs.size() == 1);
    CHECK(log_rest.epochs[0].epoch == 2);
    CHECK(log_rest.epochs[0].train_nll == log_full.epochs[1].train_nll);
    CHECK(log_rest.epochs[0].val_nll == log_full.epochs[1].val_nll);
    CHECK(resumed.state().params == full.state().params);
    CHECK(resumed.state().buffers == full.state().buffers);
    CHECK(slurp(dir / "part" / "train_log.csv") == slurp(dir / "full" / "train_log.csv"));
    CHECK(fs::exists(dir / "full" / "train_log_timing.csv"));

    // the first epoch is monotone in step count and the log has one row per epoch
    CHECK(log_full.epochs[1].step > log_full.epochs[0].step);
    std::ifstream csv(dir / "full" / "train_log.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "epoch,step,train_nll,val_nll");
    int rows = 0;
    while (std::getline(csv, line))
        ++rows;
    CHECK(rows == 2);
}

TEST_CASE("epoch data is deterministic and keeps validation cells out of training")
{
    const auto dir = scratch("epochs");
    const auto manifest = toy_manifest(dir);
    const auto cfg = toy_train_config();
    const TrainingSet a(manifest, cfg), b(manifest, cfg);
    const auto e1 = a.epoch(1), e1b = b.epoch(1), e2 = a.epoch(2);
    REQUIRE(e1.train.noisy.size() == e1b.train.noisy.size());
    for (std::size_t k = 0; k < e1.train.noisy.size(); ++k)
        CHECK(e1.train.noisy.patches[k] == e1b.train.noisy.patches[k]);
    CHECK_FALSE(e1.train.noisy.patches[0] == e2.train.noisy.patches[0]);
    // 40x48 images, 16 patch, stride 8 -> 4 x 5 cells each, 10% held out
    const std::size_t cells = 3 * 4 * 5;
    CHECK(e1.val.noisy.size() == 6);
    CHECK(e1.train.noisy.size() + e1.val.noisy.size() == cells);
    CHECK(a.train_patch_count() == cells - 6);
    CHECK(e1.val.noisy.patches[0] == e2.val.noisy.patches[0]);
}

TEST_CASE("validation is deterministic and does not touch the weights")
{
    const auto batch = noisy_patch(32, 8);
    auto net = build_network(toy_config(), 2);
    const auto params = net.state().params;
    const auto buffers = net.state().buffers;
    const double v1 = validate(net, batch);
    const double v2 = validate(net, batch);
    CHECK(v1 == v2);
    CHECK(std::isfinite(v1));
    CHECK(net.state().params == params);
    CHECK(net.state().buffers == buffers);
    CHECK_THROWS_AS(validate(net, NoisyBatch{}), DataError);
}

TEST_CASE("validation NLL of the true prior reaches the entropy optimum")
{
    const double alpha = 3.0, beta = 2.0;
    std::mt19937_64 rng(42);
    std::gamma_distribution<double> g(alpha, 1.0);
    NoisyBatch batch{LookCount(1), {}};
    batch.noisy.patch_size = 100;
    for (int k = 0; k < 100; ++k) {
        IntensityImage x(100, 100);
        for (auto& v : x.values())
            v = beta / g(rng);
        batch.noisy.patches.push_back(apply_speckle(x, sample_speckle(100, 100, LookCount(1), 100 + k)));
    }
    const double entropy = oracle::marginal_entropy(alpha, beta, 1.0);
    const double val = validate(ConstantPrior(alpha, beta), batch);
    MESSAGE("toy validation NLL " << val << " vs entropy " << entropy);
    CHECK(std::abs(val - entropy) <= 0.02 * std::abs(entropy));
    // a mismatched prior must do worse than the optimum
    CHECK(validate(ConstantPrior(1.5, 4.0), batch) > entropy);
}

TEST_CASE("the loss depends on y_i only through the likelihood term")
{
    const auto batch = noisy_patch(12, 4);
    auto net = build_network(toy_config(), 5);
    const auto& y = batch.noisy.patches[0];
    std::vector<float> input(y.values().begin(), y.values().end());
    const LookCount L(1);
    std::mt19937 rng(1);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(y.size()) - 1);
    for (int probe = 0; probe < 10; ++probe) {
        const int i = pick(rng);
        ForwardCache cache;
        const auto pred = net.forward(input, 1, 12, 12, Mode::eval, &cache);
        const auto g = neg_log_likelihood_gradient(pred.alpha[i], pred.beta[i], y[i], L);
        std::vector<float> da(y.size(), 0.0f), db(y.size(), 0.0f);
        da[i] = static_cast<float>(g.d_alpha);
        db[i] = static_cast<float>(g.d_beta);
        BackwardOptions opts;
        opts.parameter_gradient = false;
        opts.input_gradient = true;
        const auto dinput = net.backward(cache, da, db, opts);
        CHECK(dinput[i] == 0.0f);

        // total derivative of the pixel-i term by finite differences
        const double h = 1e-3 * y[i];
        auto term = [&](double yi) {
            auto in = input;
            in[i] = static_cast<float>(yi);
            const auto p = net.forward(in, 1, 12, 12, Mode::eval);
            return neg_log_likelihood(p.alpha[i], p.beta[i], yi, L);
        };
        const double fd = (term(y[i] + h) - term(y[i] - h)) / (2.0 * h);
        CHECK(fd == doctest::Approx(g.d_y).epsilon(1e-4));
    }
}

TEST_CASE("divergence and data hygiene guards")
{
    SUBCASE("non-finite weights abort the step")
    {
        auto net = build_network(toy_config(), 1);
        for (auto& p : net.parameters())
            p = std::numeric_limits<float>::quiet_NaN();
        AdamState adam;
        CHECK_THROWS_AS(train_step(net, adam, noisy_patch(16, 1), TrainConfig{}), NumericError);
    }
    SUBCASE("real-domain data needs the whitening attestation")
    {
        const auto dir = scratch("real");
        save_raw(scene(32, 32, 1), dir / "tile.raw");
        DatasetManifest m;
        m.normalization = Normalization::fixed(100.0);
        m.entries.push_back({dir / "tile.raw", Role::train, Domain::real, 1, {}, {}});
        auto cfg = toy_train_config();
        CHECK_THROWS_AS(TrainingSet(m, cfg), DataError);
        m.whitened = true;
        CHECK_NOTHROW(TrainingSet(m, cfg));
        cfg.looks = 4;
        CHECK_THROWS_AS(TrainingSet(m, cfg), DataError);
    }
}
