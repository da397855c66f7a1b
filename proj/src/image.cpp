#include "promptseg/image.hpp"

#include <algorithm>
#include <cmath>

namespace promptseg {

double Image::intensity(int y, int x) const {
    double sum = 0.0;
    for (int c = 0; c < channels_; ++c) sum += at(y, x, c);
    return channels_ > 0 ? sum / channels_ : 0.0;
}

Map resize_bilinear(const Map& src, ImageSize target) {
    Map out(target.height, target.width);
    if (src.empty() || target.height <= 0 || target.width <= 0) return out;

    const double sy = static_cast<double>(src.rows()) / target.height;
    const double sx = static_cast<double>(src.cols()) / target.width;
    for (int y = 0; y < target.height; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(src.rows() - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.rows() - 1);
        const double wy = fy - y0;
        for (int x = 0; x < target.width; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(src.cols() - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.cols() - 1);
            const double wx = fx - x0;
            const double top = src(y0, x0) * (1.0 - wx) + src(y0, x1) * wx;
            const double bottom = src(y1, x0) * (1.0 - wx) + src(y1, x1) * wx;
            out(y, x) = top * (1.0 - wy) + bottom * wy;
        }
    }
    return out;
}

Map min_max_normalize(const Map& map) {
    Map out(map.rows(), map.cols());
    if (map.empty()) return out;
    const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < map.count(); ++i) out.data()[i] = (map.data()[i] - *lo) / range;
    return out;
}

std::size_t count_foreground(const Mask& mask) {
    return static_cast<std::size_t>(
        std::count_if(mask.data().begin(), mask.data().end(), [](auto v) { return v != 0; }));
}

} // namespace promptseg
