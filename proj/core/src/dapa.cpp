#include "probe/dapa.hpp"

#include "probe/ops.hpp"
#include "probe/rng.hpp"

namespace probe::dapa {

using num::TensorPtr;

AlignmentHead AlignmentHead::init(int embed_dim, const DapaConfig& cfg, std::uint64_t seed) {
    AlignmentHead head;
    if (cfg.identity) {
        head.f_p = Mlp::make_identity();
        return head;
    }
    const int out = cfg.align_dim > 0 ? cfg.align_dim : std::max(1, embed_dim / 2);
    const int hidden = std::max(1, embed_dim / 2);
    Rng rng(derive_seed(seed, "dapa_head"));
    head.f_p = Mlp::init(static_cast<std::size_t>(embed_dim), static_cast<std::size_t>(hidden),
                         static_cast<std::size_t>(out), rng, true);
    return head;
}

AlignmentHead AlignmentHead::identity() {
    AlignmentHead head;
    head.f_p = Mlp::make_identity();
    return head;
}

TensorPtr dapa_loss(const TensorPtr& source_feats, const TensorPtr& target_feats,
                    const AlignmentHead& head) {
    if (!source_feats || !target_feats || source_feats->ndim() != 2 || target_feats->ndim() != 2)
        throw ContractError("dapa_loss: expects [B,D] feature batches");
    if (source_feats->dim(0) == 0 || target_feats->dim(0) == 0)
        throw ContractError("dapa_loss: empty batch");
    if (source_feats->dim(1) != target_feats->dim(1))
        throw DimensionError("dapa_loss: feature dims disagree");
    auto mu_s = num::mean_rows(head.apply(source_feats));
    auto mu_t = num::mean_rows(head.apply(target_feats));
    auto diff = num::sub(mu_s, mu_t);
    return num::sum(num::mul(diff, diff));
}

double mmd_kernel_oracle(const Matrix& xs, const Matrix& ys, const std::string& kernel) {
    if (kernel != "linear")
        throw ConfigError("mmd_kernel_oracle: unsupported kernel '" + kernel + "'");
    if (xs.cols != ys.cols) throw DimensionError("mmd_kernel_oracle: dim mismatch");
    if (xs.rows == 0 || ys.rows == 0) throw ContractError("mmd_kernel_oracle: empty sample set");
    auto dot = [](const double* a, const double* b, std::size_t n) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
        return s;
    };
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < xs.rows; ++i)
        for (std::size_t j = 0; j < xs.rows; ++j) xx += dot(xs.row(i), xs.row(j), xs.cols);
    for (std::size_t i = 0; i < ys.rows; ++i)
        for (std::size_t j = 0; j < ys.rows; ++j) yy += dot(ys.row(i), ys.row(j), ys.cols);
    for (std::size_t i = 0; i < xs.rows; ++i)
        for (std::size_t j = 0; j < ys.rows; ++j) xy += dot(xs.row(i), ys.row(j), xs.cols);
    const double bs = static_cast<double>(xs.rows), bt = static_cast<double>(ys.rows);
    return xx / (bs * bs) + yy / (bt * bt) - 2.0 * xy / (bs * bt);
}

}  // namespace probe::dapa
