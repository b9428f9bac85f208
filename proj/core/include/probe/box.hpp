#pragma once

#include <algorithm>
#include <string>

#include "probe/error.hpp"

namespace probe {

// Axis-aligned box in normalized image coordinates.
struct Box {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

    bool valid() const { return x_min < x_max && y_min < y_max; }
    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x_min + x_max); }
    double cy() const { return 0.5 * (y_min + y_max); }

    void require_valid(const std::string& who) const {
        if (!valid()) throw ContractError(who + ": invalid box");
    }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

}  // namespace probe
