#pragma once

#include <vector>

#include "probe/tensor.hpp"

namespace probe::num {

// Differentiable ops over float64 tensors. Elementwise binaries support
// same-shape operands, a scalar on either side, and a row vector broadcast
// over the rows of a 2-D matrix; anything else is a DimensionError naming
// both shapes.

// -- elementwise binary
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);
TensorPtr maximum(const TensorPtr& a, const TensorPtr& b);
TensorPtr minimum(const TensorPtr& a, const TensorPtr& b);

// -- elementwise unary
TensorPtr negate(const TensorPtr& x);
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr add_scalar(const TensorPtr& x, double c);
TensorPtr gelu(const TensorPtr& x);  // exact x * Phi(x) via erf
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr log(const TensorPtr& x);
TensorPtr exp(const TensorPtr& x);
TensorPtr sqrt(const TensorPtr& x);
TensorPtr pow_const(const TensorPtr& x, double p);
TensorPtr clamp(const TensorPtr& x, double lo, double hi);

// -- reductions
TensorPtr sum(const TensorPtr& x);        // scalar
TensorPtr mean(const TensorPtr& x);       // scalar
TensorPtr mean_rows(const TensorPtr& x);  // [R,C] -> [C]

// -- shape
TensorPtr reshape(const TensorPtr& x, Shape shape);
TensorPtr transpose(const TensorPtr& x);  // 2-D
TensorPtr concat_rows(const std::vector<TensorPtr>& parts);  // along axis 0
TensorPtr slice_rows(const TensorPtr& x, std::size_t begin, std::size_t end);  // axis 0
TensorPtr slice_cols(const TensorPtr& x, std::size_t begin, std::size_t end);  // 2-D
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);                    // 2-D
TensorPtr stack0(const std::vector<TensorPtr>& parts);  // new leading axis

// -- linear algebra (2-D)
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);     // a[m,k] * b[k,n]
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);  // a[m,k] * b[n,k]^T

// -- neural net primitives
TensorPtr softmax(const TensorPtr& x, int axis);
TensorPtr layernorm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps);
TensorPtr cosine_sim(const TensorPtr& a, const TensorPtr& b);  // 1-D each -> scalar
TensorPtr stop_gradient(const TensorPtr& x);

// -- convolution on NHWC [B,H,W,C] grids (stride 1 only)
TensorPtr conv3x3(const TensorPtr& x, const TensorPtr& w /*[3,3,Cin,Cout]*/, const TensorPtr& bias);
TensorPtr conv1x1(const TensorPtr& x, const TensorPtr& w /*[Cin,Cout]*/, const TensorPtr& bias);

// Running statistics owned by the layer that uses batchnorm.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

// Per-channel batch norm over [B,H,W,C]; batch statistics in training
// (updating `state`), running averages at inference.
TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                    BatchNormState& state, bool training);

// -- raw matmul kernels shared with non-graph code paths
void matmul_nn_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate);
void matmul_nt_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate);
void matmul_tn_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate);

}  // namespace probe::num
