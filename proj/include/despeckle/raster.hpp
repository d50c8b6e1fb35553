#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace despeckle {

/// Row-major single-channel 2-D array.
template <typename T>
class Raster {
public:
    Raster() = default;
    Raster(int height, int width, T fill = T{})
        : height_(height), width_(width)
    {
        if (height < 1 || width < 1)
            throw std::invalid_argument("raster dimensions must be positive, got " +
                                        std::to_string(height) + "x" + std::to_string(width));
        data_.assign(static_cast<std::size_t>(height) * width, fill);
    }
    Raster(int height, int width, std::vector<T> data)
        : height_(height), width_(width), data_(std::move(data))
    {
        if (height < 1 || width < 1)
            throw std::invalid_argument("raster dimensions must be positive");
        if (data_.size() != static_cast<std::size_t>(height) * width)
            throw std::invalid_argument("raster data size does not match its shape");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int r, int c) noexcept { return data_[static_cast<std::size_t>(r) * width_ + c]; }
    const T& operator()(int r, int c) const noexcept
    {
        return data_[static_cast<std::size_t>(r) * width_ + c];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& vector() const noexcept { return data_; }

    bool same_shape(const Raster& other) const noexcept
    {
        return height_ == other.height_ && width_ == other.width_;
    }
    template <typename U>
    bool same_shape(const Raster<U>& other) const noexcept
    {
        return height_ == other.height() && width_ == other.width();
    }

    /// Copy of the rectangle [r0, r0+h) x [c0, c0+w).
    Raster crop(int r0, int c0, int h, int w) const
    {
        if (r0 < 0 || c0 < 0 || h < 1 || w < 1 || r0 + h > height_ || c0 + w > width_)
            throw std::invalid_argument("crop rectangle outside raster");
        Raster out(h, w);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c)
                out(r, c) = (*this)(r0 + r, c0 + c);
        return out;
    }

    friend bool operator==(const Raster& a, const Raster& b)
    {
        return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
    }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

/// Single-channel nonnegative intensity image.
using IntensityImage = Raster<double>;

/// Boolean region selection; nonzero marks a selected pixel.
using RegionMask = Raster<unsigned char>;

template <typename T, typename U>
void require_same_shape(const Raster<T>& a, const Raster<U>& b, const char* what)
{
    if (a.height() != b.height() || a.width() != b.width())
        throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                    std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                                    " vs " + std::to_string(b.height()) + "x" +
                                    std::to_string(b.width()) + ")");
}

} // namespace despeckle
