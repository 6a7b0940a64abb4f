#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gridedit/core/error.hpp"

namespace gridedit {

// Dense H x W x C float image, interleaved (HWC) layout, nominally in [0,1].
struct Image {
    int height   = 0;
    int width    = 0;
    int channels = 3;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c = 3, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

    std::size_t size() const { return pixels.size(); }
    bool empty() const { return pixels.empty(); }

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    std::string shape_string() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }

    friend bool operator==(const Image& a, const Image& b) {
        return a.same_shape(b) && a.pixels == b.pixels;
    }
};

inline void clip01(Image& img) {
    for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

// Mean absolute difference over all elements.
inline double mean_abs_diff(const Image& a, const Image& b) {
    require_same_shape(a, b, "mean_abs_diff");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(double(a.pixels[i]) - double(b.pixels[i]));
    return a.empty() ? 0.0 : acc / double(a.size());
}

}  // namespace gridedit
