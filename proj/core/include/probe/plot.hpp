#pragma once

#include <string>
#include <vector>

namespace probe::plot {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Minimal deterministic SVG line chart; every plot is reproducible from the
// CSV it visualizes.
void write_line_chart(const std::string& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series);

}  // namespace probe::plot
