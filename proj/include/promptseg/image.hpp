#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace promptseg {

struct ImageSize {
    int height = 0;
    int width = 0;

    friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// Row-major 2-D array. Used for masks, saliency maps and probability maps.
template <class T>
class Grid {
  public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    ImageSize size() const { return {rows_, cols_}; }
    std::size_t count() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const {
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    friend bool operator==(const Grid&, const Grid&) = default;

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

using Mask = Grid<std::uint8_t>; // 0 = background, 1 = foreground
using Map = Grid<double>;

// Interleaved H×W×C image. Pixel values are in [0,1] unless the image has been
// channel-standardized for an encoder.
class Image {
  public:
    Image() = default;
    Image(int height, int width, int channels = 3, double fill = 0.0)
        : height_(height), width_(width), channels_(channels),
          data_(static_cast<std::size_t>(height) * width * channels, fill) {}

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    ImageSize size() const { return {height_, width_}; }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }
    double at(int y, int x, int c) const {
        return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }

    // Mean over channels.
    double intensity(int y, int x) const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    friend bool operator==(const Image&, const Image&) = default;

  private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

// Bilinear resampling with half-pixel centers (matches cv::INTER_LINEAR for
// upsampling).
Map resize_bilinear(const Map& src, ImageSize target);

// Returns (map - min) / (max - min); a constant map becomes all zeros.
Map min_max_normalize(const Map& map);

std::size_t count_foreground(const Mask& mask);

} // namespace promptseg
