#pragma once

#include <cstddef>
#include <vector>

#include "probe/error.hpp"

namespace probe {

// Plain dense row-major matrix for math that lives outside the autodiff
// graph (PCA, k-means, MMD evaluation, oracles).
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

    const double* row(std::size_t r) const { return a.data() + r * cols; }
    double* row(std::size_t r) { return a.data() + r * cols; }
};

inline double squared_distance(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

// Mean of each column.
inline std::vector<double> column_mean(const Matrix& m) {
    std::vector<double> mu(m.cols, 0.0);
    if (m.rows == 0) return mu;
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* p = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c) mu[c] += p[c];
    }
    for (double& v : mu) v /= static_cast<double>(m.rows);
    return mu;
}

// Squared Euclidean distance between the column means of two sample sets;
// identical to the biased linear-kernel MMD^2 estimate.
inline double linear_mmd2(const Matrix& xs, const Matrix& ys) {
    if (xs.cols != ys.cols) throw DimensionError("linear_mmd2: column mismatch");
    if (xs.rows == 0 || ys.rows == 0) throw ContractError("linear_mmd2: empty sample set");
    const std::vector<double> mx = column_mean(xs);
    const std::vector<double> my = column_mean(ys);
    return squared_distance(mx.data(), my.data(), xs.cols);
}

}  // namespace probe
