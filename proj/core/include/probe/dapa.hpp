#pragma once

#include <cstdint>
#include <string>

#include "probe/matrix.hpp"
#include "probe/mlp.hpp"
#include "probe/tensor.hpp"

namespace probe::dapa {

struct DapaConfig {
    int align_dim = 0;      // 0 -> embed_dim / 2
    bool identity = false;  // bypass the head (tests, oracle cross-checks)
};

// Small projection head f_p applied to pooled features before alignment.
struct AlignmentHead {
    Mlp f_p;

    static AlignmentHead init(int embed_dim, const DapaConfig& cfg, std::uint64_t seed);
    static AlignmentHead identity();

    bool is_identity() const { return f_p.identity; }
    num::TensorPtr apply(const num::TensorPtr& x) const { return f_p.apply(x); }
    auto named_params(const std::string& prefix) const { return f_p.named_params(prefix); }
};

// Squared distance between the projected batch means; the biased
// linear-kernel MMD^2 of the projected features.
num::TensorPtr dapa_loss(const num::TensorPtr& source_feats, const num::TensorPtr& target_feats,
                         const AlignmentHead& head);

// Reference path: kernel double-sum estimate. Only the linear kernel is
// supported; anything else is a config error.
double mmd_kernel_oracle(const Matrix& xs, const Matrix& ys, const std::string& kernel);

}  // namespace probe::dapa
