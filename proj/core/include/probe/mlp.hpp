#pragma once

#include <string>
#include <utility>
#include <vector>

#include "probe/ops.hpp"
#include "probe/rng.hpp"
#include "probe/tensor.hpp"

namespace probe {

// Two-layer GELU MLP, the shape family shared by the prompt projector, the
// SSL heads and the alignment head. An identity-configured instance passes
// inputs through untouched, which several loss contracts rely on for tests.
struct Mlp {
    num::TensorPtr w1, b1, w2, b2;
    bool identity = false;

    static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng,
                    bool trainable = true) {
        Mlp m;
        auto weight = [&rng](std::size_t r, std::size_t c, bool tr) {
            std::vector<double> v(r * c);
            const double std = 1.0 / std::sqrt(static_cast<double>(r));
            for (double& x : v) x = rng.truncated_normal(std);
            return num::Tensor::make({r, c}, std::move(v), tr);
        };
        m.w1 = weight(in, hidden, trainable);
        m.b1 = num::Tensor::zeros({hidden}, trainable);
        m.w2 = weight(hidden, out, trainable);
        m.b2 = num::Tensor::zeros({out}, trainable);
        return m;
    }

    static Mlp make_identity() {
        Mlp m;
        m.identity = true;
        return m;
    }

    // x: [R,in] or [in]
    num::TensorPtr apply(const num::TensorPtr& x) const {
        if (identity) return x;
        const bool vec = x->ndim() == 1;
        num::TensorPtr h = vec ? num::reshape(x, {1, x->dim(0)}) : x;
        h = num::add(num::matmul(h, w1), b1);
        h = num::gelu(h);
        h = num::add(num::matmul(h, w2), b2);
        return vec ? num::reshape(h, {h->dim(1)}) : h;
    }

    std::vector<std::pair<std::string, num::TensorPtr>> named_params(const std::string& prefix) const {
        if (identity) return {};
        return {{prefix + ".w1", w1}, {prefix + ".b1", b1}, {prefix + ".w2", w2}, {prefix + ".b2", b2}};
    }

    std::size_t out_dim() const { return identity ? 0 : w2->dim(1); }
};

}  // namespace probe
