#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "despeckle/blindspot_net.hpp"
#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"

namespace despeckle {

namespace fs = std::filesystem;
using nlohmann::json;

// Layout (little-endian):
//   "DSPKCKPT" | u32 version | u64 n | n bytes JSON header
//   | tensor* | u64 FNV-1a of all preceding bytes
// tensor: u32 name length | name | u64 count | count float32
// The JSON header names the tensors in order.

namespace {

constexpr char kMagic[8] = {'D', 'S', 'P', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const char* data, std::size_t n)
{
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_tensor(std::string& out, const std::string& name, const std::vector<float>& values)
{
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint64_t>(out, values.size());
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
}

class Reader {
public:
    Reader(const std::string& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }
    std::string get_string(std::size_t n)
    {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<float> get_floats(std::uint64_t n)
    {
        if (n > (bytes_.size() - pos_) / sizeof(float))
            fail("tensor extends past end of file");
        std::vector<float> v(n);
        std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return v;
    }
    std::size_t position() const { return pos_; }
    [[noreturn]] void fail(const std::string& why) const
    {
        throw DataError("invalid checkpoint " + path_.string() + ": " + why);
    }

private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            fail("truncated file");
    }
    const std::string& bytes_;
    const fs::path& path_;
    std::size_t pos_ = 0;
};

json config_to_json(const NetConfig& c)
{
    return {{"depth", c.depth},
            {"width", c.width},
            {"kernel", c.kernel},
            {"head_layers", c.head_layers},
            {"leaky_slope", c.leaky_slope},
            {"out_channels", NetConfig::out_channels}};
}

NetConfig config_from_json(const json& j)
{
    NetConfig c;
    c.depth = j.at("depth").get<int>();
    c.width = j.at("width").get<int>();
    c.kernel = j.at("kernel").get<int>();
    c.head_layers = j.at("head_layers").get<int>();
    c.leaky_slope = j.at("leaky_slope").get<double>();
    if (j.value("out_channels", NetConfig::out_channels) != NetConfig::out_channels)
        throw DataError("checkpoint declares an unsupported number of output channels");
    return c;
}

} // namespace

void save_checkpoint(const NetState& net, const fs::path& path,
                     const std::map<std::string, std::vector<float>>& extras)
{
    json header;
    header["format"] = "despeckle-checkpoint";
    header["config"] = config_to_json(net.config);
    header["step"] = net.step;
    header["metadata"] = net.metadata;
    json names = json::array({"params", "buffers"});
    for (const auto& [name, _] : extras)
        names.push_back(name);
    header["tensors"] = names;
    const std::string text = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, text.size());
    out += text;
    put_tensor(out, "params", net.params);
    put_tensor(out, "buffers", net.buffers);
    for (const auto& [name, values] : extras)
        put_tensor(out, name, values);
    put<std::uint64_t>(out, fnv1a(out.data(), out.size()));
    write_file_atomic(path, out);
}

CheckpointData read_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    Reader rd(bytes, path);
    if (rd.get_string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        rd.fail("bad magic (not a checkpoint)");
    const auto version = rd.get<std::uint32_t>();
    if (version != kVersion)
        rd.fail("unsupported format version " + std::to_string(version));
    const auto header_len = rd.get<std::uint64_t>();
    if (header_len > bytes.size())
        rd.fail("truncated file");
    json header;
    try {
        header = json::parse(rd.get_string(header_len));
    } catch (const json::exception& e) {
        rd.fail(std::string("corrupt header: ") + e.what());
    }

    CheckpointData data;
    try {
        data.net.config = config_from_json(header.at("config"));
        data.net.step = header.at("step").get<std::int64_t>();
        data.net.metadata = header.value("metadata", std::map<std::string, std::string>{});
        for (const auto& name_json : header.at("tensors")) {
            const auto expected = name_json.get<std::string>();
            const auto name = rd.get_string(rd.get<std::uint32_t>());
            if (name != expected)
                rd.fail("tensor '" + name + "' out of order (expected '" + expected + "')");
            auto values = rd.get_floats(rd.get<std::uint64_t>());
            if (name == "params")
                data.net.params = std::move(values);
            else if (name == "buffers")
                data.net.buffers = std::move(values);
            else
                data.extras.emplace(name, std::move(values));
        }
    } catch (const json::exception& e) {
        rd.fail(std::string("malformed header: ") + e.what());
    }
    const std::size_t body = rd.position();
    const auto checksum = rd.get<std::uint64_t>();
    if (checksum != fnv1a(bytes.data(), body))
        rd.fail("checksum mismatch");
    if (rd.position() != bytes.size())
        rd.fail("trailing bytes after checksum");
    try {
        BlindSpotNet probe(data.net); // validates tensor sizes against the config
    } catch (const std::invalid_argument& e) {
        rd.fail(e.what());
    }
    return data;
}

NetState load_checkpoint(const fs::path& path) { return read_checkpoint(path).net; }

} // namespace despeckle
