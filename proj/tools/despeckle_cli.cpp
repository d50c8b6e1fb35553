// despeckle: simulate | train | despeckle | evaluate
//
// Options come from an optional JSON config (one object per subcommand,
// e.g. {"train": {"epochs": 5, "net": {"depth": 8}}}); flags given on the
// command line override it. Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/data_pipeline.hpp"
#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"
#include "despeckle/inference.hpp"
#include "despeckle/metrics.hpp"
#include "despeckle/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace despeckle;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json config_section(const std::optional<std::string>& path, const std::string& name)
{
    if (!path)
        return json::object();
    std::ifstream in(*path);
    if (!in)
        throw UsageError("cannot open config file " + *path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("malformed config " + *path + ": " + e.what());
    }
    if (!j.is_object())
        throw UsageError("config must be a JSON object");
    return j.contains(name) ? j.at(name) : json::object();
}

template <typename T>
T pick(const std::optional<T>& flag, const json& cfg, const char* key, std::optional<T> fallback = {})
{
    if (flag)
        return *flag;
    if (cfg.contains(key))
        return cfg.at(key).get<T>();
    if (fallback)
        return *fallback;
    throw UsageError(std::string("missing required setting '") + key + "'");
}

std::string file_id(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 15];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

NetConfig net_config(const json& j)
{
    NetConfig c;
    if (!j.is_object())
        throw UsageError("'net' must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "depth") c.depth = value.get<int>();
        else if (key == "width") c.width = value.get<int>();
        else if (key == "kernel") c.kernel = value.get<int>();
        else if (key == "head_layers") c.head_layers = value.get<int>();
        else if (key == "leaky_slope") c.leaky_slope = value.get<double>();
        else throw UsageError("unknown net config key '" + key + "'");
    }
    return c;
}

struct SimulateArgs {
    std::optional<std::string> train_dir, test_dir, out;
    std::optional<int> looks;
    std::optional<std::uint64_t> seed;
};

int run_simulate(const SimulateArgs& a, const json& cfg)
{
    const fs::path train_dir = pick(a.train_dir, cfg, "train_dir");
    const auto test_dir = pick(a.test_dir, cfg, "test_dir", std::optional<std::string>(""));
    const fs::path out = pick(a.out, cfg, "out");
    const LookCount looks(pick(a.looks, cfg, "looks", std::optional<int>(1)));
    const auto seed = pick(a.seed, cfg, "seed");
    const auto train = list_images(train_dir);
    const auto test = test_dir.empty() ? std::vector<fs::path>{} : list_images(test_dir);
    const auto m = simulate_dataset(train, test, looks, seed, out);
    std::cout << "simulated " << m.with_role(Role::train).size() << " training and "
              << m.with_role(Role::test).size() << " test images (L=" << looks.value()
              << ") -> " << (out / "manifest.json").string() << "\n";
    return 0;
}

struct TrainArgs {
    std::optional<std::string> manifest, out, resume;
    std::optional<int> epochs, batch_size, patch, stride, depth, width, checkpoint_every;
    std::optional<double> lr, validation_fraction;
    std::optional<std::uint64_t> seed, net_seed;
    bool no_augment = false;
};

int run_train(const TrainArgs& a, const json& cfg_in)
{
    json cfg = cfg_in;
    json net_json = cfg.contains("net") ? cfg.at("net") : json::object();
    cfg.erase("net");
    const fs::path manifest_path = pick(a.manifest, cfg, "manifest");
    const fs::path out = pick(a.out, cfg, "out");
    cfg.erase("manifest");
    cfg.erase("out");
    std::optional<std::uint64_t> net_seed = a.net_seed;
    if (!net_seed && cfg.contains("net_seed"))
        net_seed = cfg.at("net_seed").get<std::uint64_t>();
    cfg.erase("net_seed");

    if (a.epochs) cfg["epochs"] = *a.epochs;
    if (a.batch_size) cfg["batch_size"] = *a.batch_size;
    if (a.patch) cfg["patch_size"] = *a.patch;
    if (a.stride) cfg["stride"] = *a.stride;
    if (a.checkpoint_every) cfg["checkpoint_every"] = *a.checkpoint_every;
    if (a.lr) cfg["learning_rate"] = *a.lr;
    if (a.validation_fraction) cfg["validation_fraction"] = *a.validation_fraction;
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.no_augment) cfg["augment"] = false;
    if (a.depth) net_json["depth"] = *a.depth;
    if (a.width) net_json["width"] = *a.width;
    if (!cfg.contains("seed"))
        throw UsageError("training needs an explicit seed (--seed or config)");
    const auto tc = train_config_from_json(cfg.dump());
    const auto nc = net_config(net_json);
    nc.validate();

    const auto manifest = load_manifest(manifest_path);
    auto net = build_network(nc, net_seed ? *net_seed : derive_seed(tc.seed, 0x4e4554));
    std::cout << "training " << net.parameter_count() << " parameters (depth " << nc.depth
              << ", width " << nc.width << ") for " << tc.epochs << " epochs\n";
    TrainOptions opts;
    opts.out_dir = out;
    if (a.resume)
        opts.resume_from = fs::path(*a.resume);
    opts.on_epoch = [](const EpochRecord& r) {
        std::cout << "epoch " << r.epoch << "  step " << r.step << "  train_nll " << r.train_nll;
        if (r.val_nll)
            std::cout << "  val_nll " << *r.val_nll;
        std::printf("  (%.1fs)\n", r.wall_seconds);
        std::cout.flush();
    };
    train(net, manifest, tc, opts);
    save_checkpoint(net.state(), out / "model.ckpt");
    std::cout << "wrote " << (out / "model.ckpt").string() << "\n";
    return 0;
}

struct DespeckleArgs {
    std::optional<std::string> checkpoint, input, output, pgm, manifest, out_dir, export_params,
        role;
    std::optional<int> looks, tile, overlap;
};

int run_despeckle(const DespeckleArgs& a, const json& cfg)
{
    const fs::path ckpt = pick(a.checkpoint, cfg, "checkpoint");
    const BlindSpotNet net(load_checkpoint(ckpt));
    const auto norm = trained_normalization(net.state());
    TilingPlan plan;
    plan.tile = pick(a.tile, cfg, "tile", std::optional<int>(plan.tile));
    plan.overlap = pick(a.overlap, cfg, "overlap", std::optional<int>(plan.overlap));
    const auto export_dir = pick(a.export_params, cfg, "export_params", std::optional<std::string>(""));
    const auto looks_it = net.state().metadata.find("looks");

    auto run_one = [&](const fs::path& in, const fs::path& out, int looks,
                       const std::optional<fs::path>& pgm) {
        const auto res = despeckle_image(net, load_image(in), LookCount(looks), plan, norm);
        fs::create_directories(fs::absolute(out).parent_path());
        save_raw(res.estimate, out);
        if (pgm)
            save_pgm(res.estimate, *pgm);
        if (!export_dir.empty()) {
            fs::create_directories(export_dir);
            save_raw(res.params.alpha, fs::path(export_dir) / (in.stem().string() + "_alpha.raw"));
            save_raw(res.params.beta, fs::path(export_dir) / (in.stem().string() + "_beta.raw"));
        }
        std::cout << in.string() << " -> " << out.string() << "\n";
    };

    const auto manifest_path = pick(a.manifest, cfg, "manifest", std::optional<std::string>(""));
    if (!manifest_path.empty()) {
        const auto m = load_manifest(manifest_path);
        trained_normalization(net.state(), &m.normalization);
        const fs::path out_dir = pick(a.out_dir, cfg, "out_dir");
        const auto role_name = pick(a.role, cfg, "role", std::optional<std::string>("test"));
        Role role = Role::test;
        if (role_name == "train") role = Role::train;
        else if (role_name == "val") role = Role::val;
        else if (role_name != "test") throw UsageError("unknown role '" + role_name + "'");
        for (const auto* e : m.with_role(role)) {
            const auto stem = e->path.stem().string();
            run_one(e->path, out_dir / (stem + ".raw"), e->looks, out_dir / (stem + ".pgm"));
        }
        return 0;
    }
    int looks = 0;
    if (a.looks || cfg.contains("looks") || looks_it == net.state().metadata.end())
        looks = pick(a.looks, cfg, "looks");
    else
        looks = std::stoi(looks_it->second);
    std::optional<fs::path> pgm;
    if (a.pgm)
        pgm = fs::path(*a.pgm);
    run_one(pick(a.input, cfg, "input"), pick(a.output, cfg, "output"), looks, pgm);
    return 0;
}

struct EvaluateArgs {
    std::optional<std::string> manifest, despeckled, out, train_log, checkpoint, role;
    std::optional<double> peak;
};

int run_evaluate(const EvaluateArgs& a, const json& cfg)
{
    const auto m = load_manifest(pick(a.manifest, cfg, "manifest"));
    const fs::path est_dir = pick(a.despeckled, cfg, "despeckled");
    const fs::path out = pick(a.out, cfg, "out");
    const auto train_log = pick(a.train_log, cfg, "train_log", std::optional<std::string>(""));
    const auto ckpt = pick(a.checkpoint, cfg, "checkpoint", std::optional<std::string>(""));
    const auto role_name = pick(a.role, cfg, "role", std::optional<std::string>("test"));
    MetricsReport rep;
    rep.peak = pick(a.peak, cfg, "peak", std::optional<double>(255.0));
    rep.metadata["manifest_id"] = m.id();
    rep.metadata["normalization"] = m.normalization.id();
    if (!ckpt.empty()) {
        rep.metadata["checkpoint_id"] = file_id(ckpt);
        rep.metadata["checkpoint_step"] = std::to_string(load_checkpoint(ckpt).step);
    }
    std::vector<IntensityImage> noisy_all, est_all;
    std::optional<int> looks;
    for (const auto& e : m.entries) {
        if (to_string(e.role) != role_name)
            continue;
        if (looks && *looks != e.looks)
            throw DataError("evaluated entries mix look counts");
        looks = e.looks;
        const auto noisy = load_image(e.path);
        const auto est = load_image(est_dir / (e.path.stem().string() + ".raw"));
        std::optional<IntensityImage> clean;
        std::optional<RegionMask> mask;
        if (e.clean)
            clean = load_image(*e.clean);
        if (e.mask)
            mask = load_mask(*e.mask);
        rep.images.push_back(evaluate_image(e.path.stem().string(), noisy, est,
                                            clean ? &*clean : nullptr, mask ? &*mask : nullptr,
                                            rep.peak));
        noisy_all.push_back(noisy);
        est_all.push_back(est);
    }
    if (rep.images.empty())
        throw DataError("manifest has no '" + role_name + "' entries to evaluate");
    rep.looks = *looks;
    rep.global_ratio = ratio_moments(noisy_all, est_all);
    rep.ratio_hist = ratio_histogram(noisy_all, est_all, 0.0, 1.0 + 5.0 / std::sqrt(rep.looks), 60);
    if (!train_log.empty())
        rep.training = read_train_log(train_log);
    emit_report(rep, out);

    for (const auto& im : rep.images) {
        std::cout << im.name;
        auto db = [](double v) { return v >= kPsnrCap ? std::string("inf") : std::to_string(v); };
        if (im.psnr)
            std::cout << "  PSNR noisy " << db(*im.psnr_noisy) << " dB -> " << db(*im.psnr) << " dB";
        if (im.enl)
            std::cout << "  ENL " << im.enl_noisy->value << " -> " << im.enl->value;
        std::cout << "  ratio mean " << im.ratio.mean << " std " << im.ratio.stddev << "\n";
    }
    std::cout << "overall ratio mean " << rep.global_ratio.mean << " std " << rep.global_ratio.stddev
              << "\nreport written to " << out.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Self-supervised Bayesian SAR despeckling"};
    app.require_subcommand(1);
    std::optional<std::string> config;
    app.add_option("-c,--config", config, "JSON config file");

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "speckle clean images and write a manifest");
    s->add_option("--train-dir", sim.train_dir, "directory of clean training images");
    s->add_option("--test-dir", sim.test_dir, "directory of clean test images");
    s->add_option("-o,--out", sim.out, "output directory");
    s->add_option("-L,--looks", sim.looks, "number of looks");
    s->add_option("--seed", sim.seed, "speckle seed");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train the blind-spot network on noisy data only");
    t->add_option("-m,--manifest", tr.manifest, "dataset manifest");
    t->add_option("-o,--out", tr.out, "output directory for checkpoints and logs");
    t->add_option("--resume", tr.resume, "checkpoint to resume from");
    t->add_option("--epochs", tr.epochs);
    t->add_option("--batch-size", tr.batch_size);
    t->add_option("--lr", tr.lr, "learning rate");
    t->add_option("--patch", tr.patch, "patch size");
    t->add_option("--stride", tr.stride, "patch stride");
    t->add_option("--depth", tr.depth, "network depth");
    t->add_option("--width", tr.width, "network width");
    t->add_option("--checkpoint-every", tr.checkpoint_every, "epochs between checkpoints");
    t->add_option("--validation-fraction", tr.validation_fraction);
    t->add_option("--seed", tr.seed, "data and optimisation seed");
    t->add_option("--net-seed", tr.net_seed, "initialisation seed (default: derived from --seed)");
    t->add_flag("--no-augment", tr.no_augment, "disable dihedral augmentation");

    DespeckleArgs ds;
    auto* d = app.add_subcommand("despeckle", "despeckle an image or the entries of a manifest");
    d->add_option("--checkpoint", ds.checkpoint, "trained checkpoint");
    d->add_option("-i,--input", ds.input, "noisy image");
    d->add_option("-o,--output", ds.output, "despeckled raw output");
    d->add_option("--pgm", ds.pgm, "also write an 8-bit preview");
    d->add_option("-m,--manifest", ds.manifest, "despeckle all entries of a role instead");
    d->add_option("--out-dir", ds.out_dir, "output directory in manifest mode");
    d->add_option("--role", ds.role, "manifest role (default test)");
    d->add_option("-L,--looks", ds.looks, "number of looks (default: training value)");
    d->add_option("--tile", ds.tile);
    d->add_option("--overlap", ds.overlap);
    d->add_option("--export-params", ds.export_params, "directory for alpha/beta maps");

    EvaluateArgs ev;
    auto* e = app.add_subcommand("evaluate", "compute metrics and write a report");
    e->add_option("-m,--manifest", ev.manifest, "dataset manifest");
    e->add_option("--despeckled", ev.despeckled, "directory of despeckled raw outputs");
    e->add_option("-o,--out", ev.out, "report directory");
    e->add_option("--train-log", ev.train_log, "training log CSV for the curve plot");
    e->add_option("--checkpoint", ev.checkpoint, "checkpoint, recorded in the metadata");
    e->add_option("--role", ev.role, "manifest role (default test)");
    e->add_option("--peak", ev.peak, "PSNR peak value (default 255)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*s)
            return run_simulate(sim, config_section(config, "simulate"));
        if (*t)
            return run_train(tr, config_section(config, "train"));
        if (*d)
            return run_despeckle(ds, config_section(config, "despeckle"));
        return run_evaluate(ev, config_section(config, "evaluate"));
    } catch (const UsageError& err) {
        std::cerr << "usage error: " << err.what() << "\n";
        return 1;
    } catch (const json::exception& err) {
        std::cerr << "usage error: bad config value: " << err.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& err) {
        std::cerr << "invalid argument: " << err.what() << "\n";
        return 1;
    } catch (const DataError& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& err) {
        std::cerr << "data error: " << err.what() << "\n";
        return 2;
    } catch (const NumericError& err) {
        std::cerr << "numeric failure: " << err.what() << "\n";
        return 3;
    } catch (const std::domain_error& err) {
        std::cerr << "numeric failure: " << err.what() << "\n";
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
}
