#include "despeckle/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"

namespace despeckle {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Role role)
{
    switch (role) {
    case Role::train: return "train";
    case Role::val: return "val";
    case Role::test: return "test";
    }
    return "?";
}

std::string to_string(Domain domain) { return domain == Domain::real ? "real" : "synthetic"; }

namespace {

Role parse_role(const std::string& s)
{
    if (s == "train") return Role::train;
    if (s == "val") return Role::val;
    if (s == "test") return Role::test;
    throw DataError("unknown manifest role '" + s + "'");
}

Domain parse_domain(const std::string& s)
{
    if (s == "synthetic") return Domain::synthetic;
    if (s == "real") return Domain::real;
    throw DataError("unknown manifest domain '" + s + "'");
}

std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

json manifest_to_json(const DatasetManifest& m, const fs::path& base)
{
    // an empty base keeps file names only, which makes the hash independent
    // of where the dataset lives
    auto rel = [&](const fs::path& p) {
        if (base.empty())
            return p.filename().generic_string();
        const auto abs = fs::absolute(p).lexically_normal();
        const auto r = abs.lexically_relative(base);
        const bool outside = r.empty() || *r.begin() == "..";
        return outside ? abs.generic_string() : r.generic_string();
    };
    json entries = json::array();
    for (const auto& e : m.entries) {
        json j{{"path", rel(e.path)},
               {"role", to_string(e.role)},
               {"domain", to_string(e.domain)},
               {"looks", e.looks}};
        if (e.clean)
            j["clean"] = rel(*e.clean);
        if (e.mask)
            j["mask"] = rel(*e.mask);
        entries.push_back(std::move(j));
    }
    return {{"format", "despeckle-manifest"},
            {"version", DatasetManifest::kVersion},
            {"seed", m.seed},
            {"whitened", m.whitened},
            {"normalization",
             {{"scheme", m.normalization.scheme == Normalization::Scheme::fixed_divisor
                             ? "fixed_divisor"
                             : "mean_divisor"},
              {"scale", m.normalization.scale}}},
            {"entries", entries}};
}

} // namespace

Normalization Normalization::fixed(double divisor)
{
    if (!(divisor > 0.0) || !std::isfinite(divisor))
        throw std::invalid_argument("normalization divisor must be finite and > 0");
    return {Scheme::fixed_divisor, divisor};
}

Normalization Normalization::dataset_mean(std::span<const IntensityImage> images)
{
    long double sum = 0.0;
    std::size_t count = 0;
    for (const auto& img : images) {
        for (double v : img.values())
            sum += v;
        count += img.size();
    }
    const double mean = count ? static_cast<double>(sum / count) : 0.0;
    if (!(mean > 0.0) || !std::isfinite(mean))
        throw DataError("mean-divisor normalization needs a dataset with positive mean intensity");
    return {Scheme::mean_divisor, mean};
}

std::string Normalization::id() const
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s:%.17g",
                  scheme == Scheme::fixed_divisor ? "fixed" : "mean", scale);
    return buf;
}

Normalization Normalization::parse(const std::string& id)
{
    const auto colon = id.find(':');
    if (colon == std::string::npos)
        throw DataError("malformed normalization id '" + id + "'");
    const std::string kind = id.substr(0, colon);
    double scale = 0.0;
    try {
        scale = std::stod(id.substr(colon + 1));
    } catch (const std::exception&) {
        throw DataError("malformed normalization id '" + id + "'");
    }
    if (!(scale > 0.0))
        throw DataError("normalization scale must be > 0 in '" + id + "'");
    if (kind == "fixed")
        return {Scheme::fixed_divisor, scale};
    if (kind == "mean")
        return {Scheme::mean_divisor, scale};
    throw DataError("unknown normalization scheme '" + kind + "'");
}

IntensityImage normalize(const IntensityImage& img, const Normalization& norm)
{
    IntensityImage out = img;
    for (auto& v : out.values())
        v /= norm.scale;
    return out;
}

IntensityImage denormalize(const IntensityImage& img, const Normalization& norm)
{
    IntensityImage out = img;
    for (auto& v : out.values())
        v *= norm.scale;
    return out;
}

void DatasetManifest::validate() const
{
    std::map<std::string, Role> seen;
    for (const auto& e : entries) {
        const auto key = e.path.lexically_normal().generic_string();
        const auto [it, inserted] = seen.emplace(key, e.role);
        if (!inserted && it->second != e.role)
            throw DataError("manifest path " + key + " appears in roles " + to_string(it->second) +
                            " and " + to_string(e.role));
        if (!inserted)
            throw DataError("manifest path " + key + " is listed twice");
        if (e.looks < 1)
            throw DataError("manifest entry " + key + " has an invalid look count");
        if (e.domain == Domain::real && e.clean)
            throw DataError("real-domain entry " + key + " must not carry a clean reference");
    }
    if (!(normalization.scale > 0.0))
        throw DataError("manifest normalization scale must be > 0");
}

std::vector<const ManifestEntry*> DatasetManifest::with_role(Role role) const
{
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.role == role)
            out.push_back(&e);
    return out;
}

std::string DatasetManifest::id() const { return hex64(fnv1a(manifest_to_json(*this, {}).dump())); }

DatasetManifest load_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open manifest " + path.string());
    DatasetManifest m;
    try {
        const json j = json::parse(in);
        if (j.value("format", std::string{}) != "despeckle-manifest")
            throw DataError("not a despeckle manifest: " + path.string());
        const int version = j.at("version").get<int>();
        if (version != DatasetManifest::kVersion)
            throw DataError("unsupported manifest version " + std::to_string(version));
        m.seed = j.at("seed").get<std::uint64_t>();
        m.whitened = j.value("whitened", false);
        const auto& n = j.at("normalization");
        const auto scheme = n.at("scheme").get<std::string>();
        if (scheme == "fixed_divisor")
            m.normalization.scheme = Normalization::Scheme::fixed_divisor;
        else if (scheme == "mean_divisor")
            m.normalization.scheme = Normalization::Scheme::mean_divisor;
        else
            throw DataError("unknown normalization scheme '" + scheme + "'");
        m.normalization.scale = n.at("scale").get<double>();
        const fs::path base = path.parent_path();
        auto resolve = [&](const std::string& p) {
            const fs::path fp(p);
            return fp.is_absolute() ? fp : (base / fp).lexically_normal();
        };
        for (const auto& e : j.at("entries")) {
            ManifestEntry entry;
            entry.path = resolve(e.at("path").get<std::string>());
            entry.role = parse_role(e.at("role").get<std::string>());
            entry.domain = parse_domain(e.at("domain").get<std::string>());
            entry.looks = e.at("looks").get<int>();
            if (e.contains("clean"))
                entry.clean = resolve(e.at("clean").get<std::string>());
            if (e.contains("mask"))
                entry.mask = resolve(e.at("mask").get<std::string>());
            m.entries.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path)
{
    manifest.validate();
    const fs::path base = fs::absolute(path).lexically_normal().parent_path();
    write_file_atomic(path, manifest_to_json(manifest, base).dump(2) + "\n");
}

IntensityImage dihedral(const IntensityImage& img, int index)
{
    if (index < 0 || index > 7)
        throw std::invalid_argument("dihedral transform index must be 0..7");
    IntensityImage cur = img;
    for (int k = 0; k < index % 4; ++k) {
        const int h = cur.height(), w = cur.width();
        IntensityImage rot(w, h);
        for (int r = 0; r < w; ++r)
            for (int c = 0; c < h; ++c)
                rot(r, c) = cur(c, w - 1 - r);
        cur = std::move(rot);
    }
    if (index >= 4) {
        for (int r = 0; r < cur.height(); ++r)
            std::reverse(cur.values().begin() + static_cast<std::ptrdiff_t>(r) * cur.width(),
                         cur.values().begin() + static_cast<std::ptrdiff_t>(r + 1) * cur.width());
    }
    return cur;
}

PatchBatch extract_patches(const IntensityImage& img, int patch, int stride, bool augment,
                           std::uint64_t seed, int source_index)
{
    if (patch < 1 || stride < 1)
        throw std::invalid_argument("patch size and stride must be positive");
    if (patch > img.height() || patch > img.width())
        throw std::invalid_argument("patch of " + std::to_string(patch) + " exceeds image of " +
                                    std::to_string(img.height()) + "x" +
                                    std::to_string(img.width()));
    std::mt19937_64 rng(seed);
    auto offset = [&](int extent) {
        const int slack = (extent - patch) % stride;
        return std::uniform_int_distribution<int>(0, slack)(rng);
    };
    const int r0 = offset(img.height());
    const int c0 = offset(img.width());
    std::uniform_int_distribution<int> pick(0, 7);

    PatchBatch out;
    out.patch_size = patch;
    for (int r = r0; r + patch <= img.height(); r += stride)
        for (int c = c0; c + patch <= img.width(); c += stride) {
            const int t = augment ? pick(rng) : 0;
            auto crop = img.crop(r, c, patch, patch);
            out.patches.push_back(t ? dihedral(crop, t) : std::move(crop));
            out.origins.push_back({source_index, r, c, t});
        }
    return out;
}

SyntheticPairs make_synthetic_pairs(const PatchBatch& clean, LookCount looks, std::uint64_t seed)
{
    SyntheticPairs pairs{looks, clean, {}};
    pairs.noisy.patch_size = clean.patch_size;
    pairs.noisy.origins = clean.origins;
    pairs.noisy.patches.reserve(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const auto& c = clean.patches[i];
        const auto n = sample_speckle(c.height(), c.width(), looks, derive_seed(seed, i));
        pairs.noisy.patches.push_back(apply_speckle(c, n));
    }
    return pairs;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b)
{
    auto mix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    };
    return mix(mix(mix(base) ^ a) ^ b);
}

std::vector<fs::path> list_images(const fs::path& dir)
{
    if (!fs::is_directory(dir))
        throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".pgm" || ext == ".raw"))
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

DatasetManifest simulate_dataset(const std::vector<fs::path>& train_clean,
                                 const std::vector<fs::path>& test_clean, LookCount looks,
                                 std::uint64_t seed, const fs::path& out_dir)
{
    fs::create_directories(out_dir / "noisy");
    DatasetManifest m;
    m.seed = seed;
    m.normalization = Normalization::fixed(255.0);
    auto add = [&](const std::vector<fs::path>& files, Role role) {
        for (std::size_t i = 0; i < files.size(); ++i) {
            const auto clean = load_image(files[i]);
            const auto speckle = sample_speckle(clean.height(), clean.width(), looks,
                                                derive_seed(seed, static_cast<std::uint64_t>(role), i));
            const fs::path noisy =
                fs::absolute(out_dir).lexically_normal() / "noisy" / (to_string(role) + "_" + files[i].stem().string() + ".raw");
            save_raw(apply_speckle(clean, speckle), noisy);
            m.entries.push_back({noisy, role, Domain::synthetic, looks.value(),
                                 fs::absolute(files[i]).lexically_normal(), std::nullopt});
        }
    };
    add(train_clean, Role::train);
    add(test_clean, Role::test);
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

} // namespace despeckle
