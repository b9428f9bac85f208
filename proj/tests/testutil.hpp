#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "probe/rng.hpp"
#include "probe/tensor.hpp"

namespace testutil {

using probe::num::Graph;
using probe::num::TensorPtr;

inline bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

inline double rel_err(double a, double b) {
    const double scale = std::max({std::fabs(a), std::fabs(b), 1e-300});
    return std::fabs(a - b) / scale;
}

// True when a and b agree to `tol` relative error, treating values below
// `floor` as zero.
inline bool grad_close(double analytic, double fd, double tol = 1e-4, double floor = 5e-7) {
    if (std::fabs(analytic) < floor && std::fabs(fd) < floor) return true;
    return rel_err(analytic, fd) < tol;
}

struct GradCheckFailure {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double fd = 0.0;
};

// Central finite-difference check of d loss / d param for every coordinate
// of every listed parameter. `loss_fn` must rebuild the graph from the
// current parameter values on each call. When the loss contains
// stop_gradient branches, pass an `fd_fn` surrogate that holds those
// branches at their base-point values; the training gradient is defined
// with them frozen.
inline std::vector<GradCheckFailure> check_gradients(
    const std::function<TensorPtr()>& loss_fn,
    const std::vector<std::pair<std::string, TensorPtr>>& params, double h = 1e-5,
    double tol = 1e-4, const std::function<TensorPtr()>& fd_fn_opt = nullptr) {
    const std::function<TensorPtr()>& fd_fn = fd_fn_opt ? fd_fn_opt : loss_fn;
    Graph::active().clear();
    for (auto& [name, p] : params) p->zero_grad();
    TensorPtr loss = loss_fn();
    probe::num::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        analytic.push_back(p->has_grad() ? p->grad() : std::vector<double>(p->numel(), 0.0));
    }
    Graph::active().clear();

    std::vector<GradCheckFailure> failures;
    for (std::size_t k = 0; k < params.size(); ++k) {
        TensorPtr p = params[k].second;
        for (std::size_t i = 0; i < p->numel(); ++i) {
            const double saved = p->data()[i];
            p->data()[i] = saved + h;
            const double up = fd_fn()->item();
            Graph::active().clear();
            p->data()[i] = saved - h;
            const double down = fd_fn()->item();
            Graph::active().clear();
            p->data()[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            if (!grad_close(analytic[k][i], fd, tol)) {
                failures.push_back({params[k].first, i, analytic[k][i], fd});
            }
        }
    }
    return failures;
}

inline TensorPtr random_tensor(probe::num::Shape shape, probe::Rng& rng, double scale = 1.0,
                               bool requires_grad = false) {
    std::vector<double> v(probe::num::shape_numel(shape));
    for (double& x : v) x = rng.normal() * scale;
    return probe::num::Tensor::make(std::move(shape), std::move(v), requires_grad);
}

}  // namespace testutil
