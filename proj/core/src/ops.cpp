#include "probe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace probe::num {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244008443621048;
constexpr double kInvSqrt2Pi = 0.3989422804014326779399460599344;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double phi_cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double phi_pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return phi_cdf + x * phi_pdf;
}

double sigmoid_fwd(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Broadcast kinds supported by binary elementwise ops.
enum class Bin { Same, ScalarA, ScalarB, RowA, RowB };

Bin classify(const TensorPtr& a, const TensorPtr& b, const char* name) {
    if (same_shape(a->shape(), b->shape())) return Bin::Same;
    if (b->numel() == 1) return Bin::ScalarB;
    if (a->numel() == 1) return Bin::ScalarA;
    if (a->ndim() == 2 && b->ndim() == 1 && b->dim(0) == a->dim(1)) return Bin::RowB;
    if (b->ndim() == 2 && a->ndim() == 1 && a->dim(0) == b->dim(1)) return Bin::RowA;
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a->shape()) +
                         " and " + shape_str(b->shape()));
}

// Index of the broadcast operand's element paired with flat output index i.
inline std::size_t bcast_index(Bin kind, bool lhs, std::size_t i, std::size_t cols) {
    switch (kind) {
        case Bin::Same: return i;
        case Bin::ScalarA: return lhs ? 0 : i;
        case Bin::ScalarB: return lhs ? i : 0;
        case Bin::RowA: return lhs ? i % cols : i;
        case Bin::RowB: return lhs ? i : i % cols;
    }
    return i;
}

template <typename F, typename DA, typename DB>
TensorPtr binary_op(const char* name, const TensorPtr& a, const TensorPtr& b, F f, DA dfa, DB dfb) {
    const Bin kind = classify(a, b, name);
    const TensorPtr& big = (kind == Bin::ScalarA || kind == Bin::RowA) ? b : a;
    const std::size_t cols = (kind == Bin::RowA || kind == Bin::RowB)
                                 ? (kind == Bin::RowA ? b->dim(1) : a->dim(1))
                                 : 0;
    const std::size_t n = big->numel();
    std::vector<double> out(n);
    const double* pa = a->data();
    const double* pb = b->data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(pa[bcast_index(kind, true, i, cols)], pb[bcast_index(kind, false, i, cols)]);
    }
    return record_op(big->shape(), std::move(out), {a, b},
                     [a, b, kind, cols, dfa, dfb](Tensor& t) {
                         const std::vector<double>& g = t.grad();
                         const double* pa = a->data();
                         const double* pb = b->data();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             const std::size_t ia = bcast_index(kind, true, i, cols);
                             const std::size_t ib = bcast_index(kind, false, i, cols);
                             const double av = pa[ia];
                             const double bv = pb[ib];
                             if (a->requires_grad()) a->accumulate_grad_at(ia, dfa(av, bv) * g[i]);
                             if (b->requires_grad()) b->accumulate_grad_at(ib, dfb(av, bv) * g[i]);
                         }
                     });
}

template <typename F, typename D>
TensorPtr unary_op(const TensorPtr& x, F f, D df) {
    std::vector<double> out(x->numel());
    const double* px = x->data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
    return record_op(x->shape(), std::move(out), {x}, [x, df](Tensor& t) {
        const std::vector<double>& g = t.grad();
        const double* px = x->data();
        for (std::size_t i = 0; i < g.size(); ++i) x->accumulate_grad_at(i, df(px[i]) * g[i]);
    });
}

}  // namespace

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

TensorPtr maximum(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

TensorPtr minimum(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        "minimum", a, b, [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

TensorPtr negate(const TensorPtr& x) {
    return unary_op(x, [](double v) { return -v; }, [](double) { return -1.0; });
}

TensorPtr scale(const TensorPtr& x, double c) {
    return unary_op(x, [c](double v) { return c * v; }, [c](double) { return c; });
}

TensorPtr add_scalar(const TensorPtr& x, double c) {
    return unary_op(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

TensorPtr gelu(const TensorPtr& x) {
    return unary_op(x, gelu_fwd, gelu_grad);
}

TensorPtr sigmoid(const TensorPtr& x) {
    return unary_op(x, sigmoid_fwd, [](double v) {
        const double s = sigmoid_fwd(v);
        return s * (1.0 - s);
    });
}

TensorPtr log(const TensorPtr& x) {
    for (std::size_t i = 0; i < x->numel(); ++i)
        if (x->data()[i] <= 0.0) throw ContractError("log: non-positive input");
    return unary_op(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

TensorPtr exp(const TensorPtr& x) {
    return unary_op(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

TensorPtr sqrt(const TensorPtr& x) {
    for (std::size_t i = 0; i < x->numel(); ++i)
        if (x->data()[i] < 0.0) throw ContractError("sqrt: negative input");
    return unary_op(x, [](double v) { return std::sqrt(v); },
                    [](double v) { return 0.5 / std::sqrt(v); });
}

TensorPtr pow_const(const TensorPtr& x, double p) {
    return unary_op(x, [p](double v) { return std::pow(v, p); },
                    [p](double v) { return p * std::pow(v, p - 1.0); });
}

TensorPtr clamp(const TensorPtr& x, double lo, double hi) {
    return unary_op(x,
                    [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
                    [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

TensorPtr sum(const TensorPtr& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x->numel(); ++i) s += x->data()[i];
    return record_op(Shape{}, {s}, {x}, [x](Tensor& t) {
        const double g = t.grad()[0];
        for (std::size_t i = 0; i < x->numel(); ++i) x->accumulate_grad_at(i, g);
    });
}

TensorPtr mean(const TensorPtr& x) {
    const double inv = 1.0 / static_cast<double>(x->numel());
    double s = 0.0;
    for (std::size_t i = 0; i < x->numel(); ++i) s += x->data()[i];
    return record_op(Shape{}, {s * inv}, {x}, [x, inv](Tensor& t) {
        const double g = t.grad()[0] * inv;
        for (std::size_t i = 0; i < x->numel(); ++i) x->accumulate_grad_at(i, g);
    });
}

TensorPtr mean_rows(const TensorPtr& x) {
    if (x->ndim() != 2) throw DimensionError("mean_rows expects 2-D, got " + shape_str(x->shape()));
    const std::size_t r = x->dim(0), c = x->dim(1);
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = x->data() + i * c;
        for (std::size_t j = 0; j < c; ++j) out[j] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(r);
    for (double& v : out) v *= inv;
    return record_op(Shape{c}, std::move(out), {x}, [x, r, c, inv](Tensor& t) {
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) x->accumulate_grad_at(i * c + j, g[j] * inv);
    });
}

TensorPtr reshape(const TensorPtr& x, Shape shape) {
    if (shape_numel(shape) != x->numel())
        throw DimensionError("reshape: " + shape_str(x->shape()) + " to " + shape_str(shape) +
                             " changes element count");
    return record_op(std::move(shape), x->values(), {x}, [x](Tensor& t) {
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < g.size(); ++i) x->accumulate_grad_at(i, g[i]);
    });
}

TensorPtr transpose(const TensorPtr& x) {
    if (x->ndim() != 2) throw DimensionError("transpose expects 2-D, got " + shape_str(x->shape()));
    const std::size_t r = x->dim(0), c = x->dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x->data()[i * c + j];
    return record_op(Shape{c, r}, std::move(out), {x}, [x, r, c](Tensor& t) {
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) x->accumulate_grad_at(i * c + j, g[j * r + i]);
    });
}

namespace {
std::size_t row_size_of(const TensorPtr& t) {
    return t->dim(0) == 0 ? 0 : t->numel() / t->dim(0);
}
}  // namespace

TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const Shape& first = parts.front()->shape();
    if (first.empty()) throw DimensionError("concat_rows: inputs must have rank >= 1");
    std::size_t total_rows = 0;
    for (const auto& p : parts) {
        if (p->ndim() != first.size())
            throw DimensionError("concat_rows: rank mismatch " + shape_str(p->shape()) + " vs " +
                                 shape_str(first));
        for (std::size_t d = 1; d < first.size(); ++d)
            if (p->dim(d) != first[d])
                throw DimensionError("concat_rows: trailing dims differ " + shape_str(p->shape()) +
                                     " vs " + shape_str(first));
        total_rows += p->dim(0);
    }
    Shape out_shape = first;
    out_shape[0] = total_rows;
    std::vector<double> out;
    out.reserve(shape_numel(out_shape));
    for (const auto& p : parts) out.insert(out.end(), p->values().begin(), p->values().end());
    std::vector<TensorPtr> parents(parts.begin(), parts.end());
    return record_op(std::move(out_shape), std::move(out), std::move(parents), [parts](Tensor& t) {
        const std::vector<double>& g = t.grad();
        std::size_t off = 0;
        for (const auto& p : parts) {
            for (std::size_t i = 0; i < p->numel(); ++i) p->accumulate_grad_at(i, g[off + i]);
            off += p->numel();
        }
    });
}

TensorPtr slice_rows(const TensorPtr& x, std::size_t begin, std::size_t end) {
    if (x->ndim() < 1) throw DimensionError("slice_rows: rank >= 1 required");
    if (begin > end || end > x->dim(0))
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") out of " + std::to_string(x->dim(0)));
    const std::size_t rs = row_size_of(x);
    Shape out_shape = x->shape();
    out_shape[0] = end - begin;
    std::vector<double> out(x->values().begin() + begin * rs, x->values().begin() + end * rs);
    return record_op(std::move(out_shape), std::move(out), {x}, [x, begin, rs](Tensor& t) {
        const std::vector<double>& g = t.grad();
        const std::size_t off = begin * rs;
        for (std::size_t i = 0; i < g.size(); ++i) x->accumulate_grad_at(off + i, g[i]);
    });
}

TensorPtr slice_cols(const TensorPtr& x, std::size_t begin, std::size_t end) {
    if (x->ndim() != 2) throw DimensionError("slice_cols expects 2-D, got " + shape_str(x->shape()));
    if (begin > end || end > x->dim(1))
        throw DimensionError("slice_cols: bad column range");
    const std::size_t r = x->dim(0), c = x->dim(1), w = end - begin;
    std::vector<double> out(r * w);
    for (std::size_t i = 0; i < r; ++i)
        std::memcpy(out.data() + i * w, x->data() + i * c + begin, w * sizeof(double));
    return record_op(Shape{r, w}, std::move(out), {x}, [x, begin, r, c, w](Tensor& t) {
        const std::vector<double>& g = t.grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
                x->accumulate_grad_at(i * c + begin + j, g[i * w + j]);
    });
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts.front()->dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p->ndim() != 2 || p->dim(0) != r)
            throw DimensionError("concat_cols: incompatible " + shape_str(p->shape()));
        total += p->dim(1);
    }
    std::vector<double> out(r * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p->dim(1);
        for (std::size_t i = 0; i < r; ++i)
            std::memcpy(out.data() + i * total + off, p->data() + i * c, c * sizeof(double));
        off += c;
    }
    std::vector<TensorPtr> parents(parts.begin(), parts.end());
    return record_op(Shape{r, total}, std::move(out), std::move(parents), [parts, r, total](Tensor& t) {
        const std::vector<double>& g = t.grad();
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t c = p->dim(1);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    p->accumulate_grad_at(i * c + j, g[i * total + off + j]);
            off += c;
        }
    });
}

TensorPtr stack0(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw ContractError("stack0: no inputs");
    const Shape& s = parts.front()->shape();
    for (const auto& p : parts)
        if (!same_shape(p->shape(), s))
            throw DimensionError("stack0: shape mismatch " + shape_str(p->shape()) + " vs " +
                                 shape_str(s));
    Shape out_shape;
    out_shape.push_back(parts.size());
    out_shape.insert(out_shape.end(), s.begin(), s.end());
    std::vector<double> out;
    out.reserve(parts.size() * parts.front()->numel());
    for (const auto& p : parts) out.insert(out.end(), p->values().begin(), p->values().end());
    std::vector<TensorPtr> parents(parts.begin(), parts.end());
    return record_op(std::move(out_shape), std::move(out), std::move(parents), [parts](Tensor& t) {
        const std::vector<double>& g = t.grad();
        std::size_t off = 0;
        for (const auto& p : parts) {
            for (std::size_t i = 0; i < p->numel(); ++i) p->accumulate_grad_at(i, g[off + i]);
            off += p->numel();
        }
    });
}

void matmul_nn_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void matmul_nt_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

void matmul_tn_raw(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n, bool accumulate) {
    // c[k,n] (+)= a[m,k]^T * b[m,n]
    if (!accumulate) std::fill(c, c + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

namespace {
void check_matmul(const TensorPtr& a, const TensorPtr& b, bool b_transposed, const char* name) {
    if (a->ndim() != 2 || b->ndim() != 2)
        throw DimensionError(std::string(name) + ": expects 2-D operands, got " +
                             shape_str(a->shape()) + " and " + shape_str(b->shape()));
    const std::size_t inner_b = b_transposed ? b->dim(1) : b->dim(0);
    if (a->dim(1) != inner_b)
        throw DimensionError(std::string(name) + ": inner dimensions disagree for " +
                             shape_str(a->shape()) + " and " + shape_str(b->shape()));
}
}  // namespace

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    check_matmul(a, b, false, "matmul");
    const std::size_t m = a->dim(0), k = a->dim(1), n = b->dim(1);
    std::vector<double> out(m * n);
    matmul_nn_raw(a->data(), b->data(), out.data(), m, k, n, false);
    return record_op(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tensor& t) {
        const double* g = t.grad().data();
        if (a->requires_grad()) {
            matmul_nt_raw(g, b->data(), a->grad().data(), m, n, k, true);  // dA += dC * B^T
        }
        if (b->requires_grad()) {
            matmul_tn_raw(a->data(), g, b->grad().data(), m, k, n, true);  // dB += A^T * dC
        }
    });
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    check_matmul(a, b, true, "matmul_nt");
    const std::size_t m = a->dim(0), k = a->dim(1), n = b->dim(0);
    std::vector<double> out(m * n);
    matmul_nt_raw(a->data(), b->data(), out.data(), m, k, n, false);
    return record_op(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](Tensor& t) {
        const double* g = t.grad().data();
        if (a->requires_grad()) {
            matmul_nn_raw(g, b->data(), a->grad().data(), m, n, k, true);  // dA += dC * B
        }
        if (b->requires_grad()) {
            matmul_tn_raw(g, a->data(), b->grad().data(), m, n, k, true);  // dB += dC^T * A
        }
    });
}

TensorPtr softmax(const TensorPtr& x, int axis) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= std::max<std::size_t>(x->ndim(), 1))
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x->shape()));
    const Shape& s = x->shape();
    const std::size_t len = s.empty() ? 1 : s[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < s.size(); ++d) {
        if (d < static_cast<std::size_t>(axis)) outer *= s[d];
        if (d > static_cast<std::size_t>(axis)) inner *= s[d];
    }
    std::vector<double> out(x->numel());
    const double* px = x->data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = px[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
            double denom = 0.0;
            for (std::size_t l = 0; l < len; ++l) {
                const double e = std::exp(px[base + l * inner] - mx);
                out[base + l * inner] = e;
                denom += e;
            }
            for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= denom;
        }
    }
    return record_op(x->shape(), std::move(out), {x}, [x, outer, inner, len](Tensor& t) {
        const std::vector<double>& g = t.grad();
        const double* sm = t.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t i = base + l * inner;
                    dot += g[i] * sm[i];
                }
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t i = base + l * inner;
                    x->accumulate_grad_at(i, sm[i] * (g[i] - dot));
                }
            }
        }
    });
}

TensorPtr layernorm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias, double eps) {
    if (x->ndim() < 1) throw DimensionError("layernorm: rank >= 1 required");
    if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
    const std::size_t c = x->shape().back();
    if (gain->numel() != c || bias->numel() != c)
        throw DimensionError("layernorm: gain/bias length " + std::to_string(gain->numel()) +
                             " does not match last axis of " + shape_str(x->shape()));
    const std::size_t rows = x->numel() / c;
    std::vector<double> out(x->numel());
    const double* px = x->data();
    const double* pg = gain->data();
    const double* pb = bias->data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = px + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv_sigma = 1.0 / std::sqrt(var + eps);
        double* orow = out.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) orow[j] = pg[j] * (xr[j] - mu) * inv_sigma + pb[j];
    }
    return record_op(x->shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, eps, rows, c](Tensor& t) {
                         const std::vector<double>& g = t.grad();
                         const double* px = x->data();
                         const double* pg = gain->data();
                         for (std::size_t r = 0; r < rows; ++r) {
                             const double* xr = px + r * c;
                             const double* gr = g.data() + r * c;
                             double mu = 0.0;
                             for (std::size_t j = 0; j < c; ++j) mu += xr[j];
                             mu /= static_cast<double>(c);
                             double var = 0.0;
                             for (std::size_t j = 0; j < c; ++j) {
                                 const double d = xr[j] - mu;
                                 var += d * d;
                             }
                             var /= static_cast<double>(c);
                             const double inv_sigma = 1.0 / std::sqrt(var + eps);
                             double mean_gg = 0.0, mean_ggy = 0.0;
                             for (std::size_t j = 0; j < c; ++j) {
                                 const double y = (xr[j] - mu) * inv_sigma;
                                 const double gg = pg[j] * gr[j];
                                 mean_gg += gg;
                                 mean_ggy += gg * y;
                                 gain->accumulate_grad_at(j, gr[j] * y);
                                 bias->accumulate_grad_at(j, gr[j]);
                             }
                             mean_gg /= static_cast<double>(c);
                             mean_ggy /= static_cast<double>(c);
                             if (x->requires_grad()) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                     const double y = (xr[j] - mu) * inv_sigma;
                                     const double gg = pg[j] * gr[j];
                                     x->accumulate_grad_at(r * c + j,
                                                           inv_sigma * (gg - mean_gg - y * mean_ggy));
                                 }
                             }
                         }
                     });
}

TensorPtr cosine_sim(const TensorPtr& a, const TensorPtr& b) {
    if (a->ndim() != 1 || b->ndim() != 1 || a->numel() != b->numel())
        throw DimensionError("cosine_sim: expects equal-length vectors, got " +
                             shape_str(a->shape()) + " and " + shape_str(b->shape()));
    const std::size_t n = a->numel();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a->data()[i] * b->data()[i];
        na2 += a->data()[i] * a->data()[i];
        nb2 += b->data()[i] * b->data()[i];
    }
    if (na2 == 0.0 || nb2 == 0.0) throw DegenerateInputError("cosine_sim: zero-norm vector");
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double s = dot / (na * nb);
    return record_op(Shape{}, {s}, {a, b}, [a, b, n, na, nb, s](Tensor& t) {
        const double g = t.grad()[0];
        const double inv = 1.0 / (na * nb);
        for (std::size_t i = 0; i < n; ++i) {
            const double av = a->data()[i];
            const double bv = b->data()[i];
            if (a->requires_grad()) a->accumulate_grad_at(i, g * (bv * inv - s * av / (na * na)));
            if (b->requires_grad()) b->accumulate_grad_at(i, g * (av * inv - s * bv / (nb * nb)));
        }
    });
}

TensorPtr stop_gradient(const TensorPtr& x) {
    // Detached copy: identical values, no parents, never requires grad.
    return Tensor::make(x->shape(), x->values(), false);
}

namespace {
void check_nhwc(const TensorPtr& x, const char* name) {
    if (x->ndim() != 4)
        throw DimensionError(std::string(name) + ": expects [B,H,W,C], got " +
                             shape_str(x->shape()));
}
}  // namespace

TensorPtr conv3x3(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias) {
    check_nhwc(x, "conv3x3");
    if (w->ndim() != 4 || w->dim(0) != 3 || w->dim(1) != 3)
        throw DimensionError("conv3x3: weight must be [3,3,Cin,Cout], got " + shape_str(w->shape()));
    const std::size_t B = x->dim(0), H = x->dim(1), W = x->dim(2), Ci = x->dim(3);
    const std::size_t Co = w->dim(3);
    if (w->dim(2) != Ci)
        throw DimensionError("conv3x3: input channels " + std::to_string(Ci) +
                             " vs weight " + std::to_string(w->dim(2)));
    if (bias->numel() != Co) throw DimensionError("conv3x3: bias length mismatch");

    std::vector<double> out(B * H * W * Co);
    const double* px = x->data();
    const double* pw = w->data();
    const double* pb = bias->data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < H; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                double* o = out.data() + ((b * H + i) * W + j) * Co;
                for (std::size_t co = 0; co < Co; ++co) o[co] = pb[co];
                for (int di = -1; di <= 1; ++di) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + di;
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (int dj = -1; dj <= 1; ++dj) {
                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j) + dj;
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                        const double* xi = px + ((b * H + ii) * W + jj) * Ci;
                        const double* wk = pw + ((di + 1) * 3 + (dj + 1)) * Ci * Co;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const double xv = xi[ci];
                            const double* wc = wk + ci * Co;
                            for (std::size_t co = 0; co < Co; ++co) o[co] += xv * wc[co];
                        }
                    }
                }
            }
        }
    }
    return record_op(Shape{B, H, W, Co}, std::move(out), {x, w, bias},
                     [x, w, bias, B, H, W, Ci, Co](Tensor& t) {
                         const double* g = t.grad().data();
                         const double* px = x->data();
                         const double* pw = w->data();
                         double* gx = x->requires_grad() ? x->grad().data() : nullptr;
                         double* gw = w->requires_grad() ? w->grad().data() : nullptr;
                         double* gb = bias->requires_grad() ? bias->grad().data() : nullptr;
                         for (std::size_t b = 0; b < B; ++b) {
                             for (std::size_t i = 0; i < H; ++i) {
                                 for (std::size_t j = 0; j < W; ++j) {
                                     const double* go = g + ((b * H + i) * W + j) * Co;
                                     if (gb)
                                         for (std::size_t co = 0; co < Co; ++co) gb[co] += go[co];
                                     for (int di = -1; di <= 1; ++di) {
                                         const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i) + di;
                                         if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                                         for (int dj = -1; dj <= 1; ++dj) {
                                             const std::ptrdiff_t jj =
                                                 static_cast<std::ptrdiff_t>(j) + dj;
                                             if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W))
                                                 continue;
                                             const std::size_t xoff = ((b * H + ii) * W + jj) * Ci;
                                             const std::size_t woff =
                                                 ((di + 1) * 3 + (dj + 1)) * Ci * Co;
                                             for (std::size_t ci = 0; ci < Ci; ++ci) {
                                                 const double* wc = pw + woff + ci * Co;
                                                 const double xv = px[xoff + ci];
                                                 double acc = 0.0;
                                                 for (std::size_t co = 0; co < Co; ++co) {
                                                     acc += wc[co] * go[co];
                                                     if (gw) gw[woff + ci * Co + co] += xv * go[co];
                                                 }
                                                 if (gx) gx[xoff + ci] += acc;
                                             }
                                         }
                                     }
                                 }
                             }
                         }
                     });
}

TensorPtr conv1x1(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias) {
    check_nhwc(x, "conv1x1");
    if (w->ndim() != 2)
        throw DimensionError("conv1x1: weight must be [Cin,Cout], got " + shape_str(w->shape()));
    const std::size_t B = x->dim(0), H = x->dim(1), W = x->dim(2), Ci = x->dim(3);
    const std::size_t Co = w->dim(1);
    if (w->dim(0) != Ci) throw DimensionError("conv1x1: input channels mismatch");
    if (bias->numel() != Co) throw DimensionError("conv1x1: bias length mismatch");
    const std::size_t rows = B * H * W;
    std::vector<double> out(rows * Co);
    matmul_nn_raw(x->data(), w->data(), out.data(), rows, Ci, Co, false);
    const double* pb = bias->data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* o = out.data() + r * Co;
        for (std::size_t co = 0; co < Co; ++co) o[co] += pb[co];
    }
    return record_op(Shape{B, H, W, Co}, std::move(out), {x, w, bias},
                     [x, w, bias, rows, Ci, Co](Tensor& t) {
                         const double* g = t.grad().data();
                         if (x->requires_grad())
                             matmul_nt_raw(g, w->data(), x->grad().data(), rows, Co, Ci, true);
                         if (w->requires_grad())
                             matmul_tn_raw(x->data(), g, w->grad().data(), rows, Ci, Co, true);
                         if (bias->requires_grad()) {
                             double* gb = bias->grad().data();
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t co = 0; co < Co; ++co) gb[co] += g[r * Co + co];
                         }
                     });
}

TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                    BatchNormState& state, bool training) {
    check_nhwc(x, "batchnorm");
    const std::size_t C = x->dim(3);
    if (gain->numel() != C || bias->numel() != C)
        throw DimensionError("batchnorm: gain/bias length mismatch");
    if (state.running_mean.empty()) {
        state.running_mean.assign(C, 0.0);
        state.running_var.assign(C, 1.0);
    }
    const std::size_t n = x->numel() / C;
    std::vector<double> mu(C, 0.0), var(C, 0.0);
    const double* px = x->data();
    if (training) {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < C; ++c) mu[c] += px[r * C + c];
        for (double& v : mu) v /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = px[r * C + c] - mu[c];
                var[c] += d * d;
            }
        for (double& v : var) v /= static_cast<double>(n);
        for (std::size_t c = 0; c < C; ++c) {
            state.running_mean[c] =
                (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
            state.running_var[c] =
                (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
        }
    } else {
        mu = state.running_mean;
        var = state.running_var;
    }
    std::vector<double> inv_sigma(C);
    for (std::size_t c = 0; c < C; ++c) inv_sigma[c] = 1.0 / std::sqrt(var[c] + state.eps);
    std::vector<double> out(x->numel());
    const double* pg = gain->data();
    const double* pb = bias->data();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out[r * C + c] = pg[c] * (px[r * C + c] - mu[c]) * inv_sigma[c] + pb[c];
    return record_op(
        x->shape(), std::move(out), {x, gain, bias},
        [x, gain, bias, mu, inv_sigma, n, C, training](Tensor& t) {
            const std::vector<double>& g = t.grad();
            const double* px = x->data();
            const double* pg = gain->data();
            std::vector<double> sum_g(C, 0.0), sum_gy(C, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const double y = (px[r * C + c] - mu[c]) * inv_sigma[c];
                    sum_g[c] += g[r * C + c];
                    sum_gy[c] += g[r * C + c] * y;
                }
            for (std::size_t c = 0; c < C; ++c) {
                gain->accumulate_grad_at(c, sum_gy[c]);
                bias->accumulate_grad_at(c, sum_g[c]);
            }
            if (!x->requires_grad()) return;
            const double invn = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const double y = (px[r * C + c] - mu[c]) * inv_sigma[c];
                    double dx;
                    if (training) {
                        dx = pg[c] * inv_sigma[c] *
                             (g[r * C + c] - sum_g[c] * invn - y * sum_gy[c] * invn);
                    } else {
                        dx = pg[c] * inv_sigma[c] * g[r * C + c];
                    }
                    x->accumulate_grad_at(r * C + c, dx);
                }
        });
}

}  // namespace probe::num
