#pragma once

#include <cstddef>
#include <vector>

#include "probe/error.hpp"

namespace probe {

// Single-channel image with values in [0, 1], row-major.
struct Raster {
    int height = 0;
    int width = 0;
    std::vector<double> px;

    Raster() = default;
    Raster(int h, int w, double fill = 0.0)
        : height(h), width(w), px(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

    double& at(int y, int x) { return px[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return px[static_cast<std::size_t>(y) * width + x]; }

    std::size_t size() const { return px.size(); }

    void clamp01() {
        for (double& v : px) {
            if (v < 0.0) v = 0.0;
            if (v > 1.0) v = 1.0;
        }
    }
};

inline bool same_dims(const Raster& a, const Raster& b) {
    return a.height == b.height && a.width == b.width;
}

}  // namespace probe
