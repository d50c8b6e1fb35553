#include "despeckle/image_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "despeckle/errors.hpp"

namespace despeckle {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "raw array I/O assumes a little-endian host");

namespace {

constexpr const char* kRawMagic = "DSPKRAW";

std::string read_all(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Skips whitespace and '#' comments in a PNM header.
void skip_pnm_space(const std::string& bytes, std::size_t& pos)
{
    while (pos < bytes.size()) {
        if (bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n')
                ++pos;
        } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
            ++pos;
        } else {
            break;
        }
    }
}

long read_pnm_int(const std::string& bytes, std::size_t& pos, const fs::path& path)
{
    skip_pnm_space(bytes, pos);
    std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
        ++pos;
    if (start == pos)
        throw DataError("malformed PNM header in " + path.string());
    return std::stol(bytes.substr(start, pos - start));
}

IntensityImage parse_pgm(const std::string& bytes, const fs::path& path)
{
    const bool binary = bytes[1] == '5';
    std::size_t pos = 2;
    const long width = read_pnm_int(bytes, pos, path);
    const long height = read_pnm_int(bytes, pos, path);
    const long maxval = read_pnm_int(bytes, pos, path);
    if (width < 1 || height < 1)
        throw DataError("invalid PGM dimensions in " + path.string());
    if (maxval < 1 || maxval > 255)
        throw DataError("only 8-bit PGM is supported (maxval " + std::to_string(maxval) + ") in " +
                        path.string());
    IntensityImage img(static_cast<int>(height), static_cast<int>(width));
    if (binary) {
        ++pos; // single whitespace byte after maxval
        if (bytes.size() < pos + img.size())
            throw DataError("truncated PGM pixel data in " + path.string());
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<unsigned char>(bytes[pos + i]);
    } else {
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<double>(read_pnm_int(bytes, pos, path));
    }
    return img;
}

IntensityImage parse_raw(const std::string& bytes, const fs::path& path)
{
    const auto eol = bytes.find('\n');
    if (eol == std::string::npos)
        throw DataError("missing raw array header in " + path.string());
    std::istringstream header(bytes.substr(0, eol));
    std::string magic, type;
    int version = 0;
    long height = 0, width = 0;
    if (!(header >> magic >> version >> type >> height >> width) || magic != kRawMagic)
        throw DataError("malformed raw array header in " + path.string());
    if (version != 1)
        throw DataError("unsupported raw array version " + std::to_string(version) + " in " +
                        path.string());
    if (height < 1 || width < 1)
        throw DataError("invalid raw array dimensions in " + path.string());
    const std::size_t count = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    const std::size_t elem = type == "f64" ? 8 : type == "f32" ? 4 : 0;
    if (elem == 0)
        throw DataError("unsupported raw element type '" + type + "' in " + path.string());
    if (bytes.size() - (eol + 1) != count * elem)
        throw DataError("raw array payload size mismatch (truncated?) in " + path.string());

    IntensityImage img(static_cast<int>(height), static_cast<int>(width));
    const char* payload = bytes.data() + eol + 1;
    if (elem == 8) {
        std::memcpy(img.values().data(), payload, count * 8);
    } else {
        std::vector<float> tmp(count);
        std::memcpy(tmp.data(), payload, count * 4);
        std::copy(tmp.begin(), tmp.end(), img.values().begin());
    }
    return img;
}

} // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes)
{
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw DataError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw DataError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec)
        throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " +
                        ec.message());
}

IntensityImage load_image(const fs::path& path)
{
    const std::string bytes = read_all(path);
    if (bytes.size() >= 2 && bytes[0] == 'P') {
        if (bytes[1] == '5' || bytes[1] == '2')
            return parse_pgm(bytes, path);
        if (bytes[1] == '6' || bytes[1] == '3')
            throw DataError("colour image " + path.string() +
                            ": a single-channel (grayscale) image is required");
    }
    if (bytes.rfind(kRawMagic, 0) == 0)
        return parse_raw(bytes, path);
    throw DataError("unsupported image format: " + path.string() +
                    " (expected 8-bit grayscale PGM or raw float array)");
}

void save_raw(const IntensityImage& img, const fs::path& path)
{
    std::string bytes = std::string(kRawMagic) + " 1 f64 " + std::to_string(img.height()) + " " +
                        std::to_string(img.width()) + "\n";
    const std::size_t header = bytes.size();
    bytes.resize(header + img.size() * sizeof(double));
    std::memcpy(bytes.data() + header, img.values().data(), img.size() * sizeof(double));
    write_file_atomic(path, bytes);
}

void save_pgm(const IntensityImage& img, const fs::path& path)
{
    std::string bytes = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) +
                        "\n255\n";
    bytes.reserve(bytes.size() + img.size());
    for (double v : img.values()) {
        const double q = std::isfinite(v) ? std::clamp(std::round(v), 0.0, 255.0) : 0.0;
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(q)));
    }
    write_file_atomic(path, bytes);
}

RegionMask load_mask(const fs::path& path)
{
    const IntensityImage img = load_image(path);
    RegionMask mask(img.height(), img.width());
    for (std::size_t i = 0; i < img.size(); ++i)
        mask[i] = img[i] != 0.0 ? 1 : 0;
    return mask;
}

void save_mask(const RegionMask& mask, const fs::path& path)
{
    IntensityImage img(mask.height(), mask.width());
    for (std::size_t i = 0; i < mask.size(); ++i)
        img[i] = mask[i] ? 255.0 : 0.0;
    save_pgm(img, path);
}

} // namespace despeckle
