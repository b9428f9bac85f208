#include "probe/backbone.hpp"

#include <cmath>

#include "probe/ops.hpp"

namespace probe::backbone {

using num::Tensor;
using num::TensorPtr;

void Config::validate() const {
    if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || num_layers <= 0 || num_heads <= 0)
        throw ConfigError("backbone: sizes must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("backbone: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
        throw ConfigError("backbone: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (embed_dim % 4 != 0)
        throw ConfigError("backbone: embed_dim must be divisible by 4 for 2-D position encodings");
    if (mlp_ratio <= 0.0) throw ConfigError("backbone: mlp_ratio must be positive");
    if (channels <= 0) throw ConfigError("backbone: channels must be positive");
    for (int l : injection_layers)
        if (l < 0 || l >= num_layers)
            throw ConfigError("backbone: injection layer " + std::to_string(l) +
                              " outside [0," + std::to_string(num_layers) + ")");
}

namespace {

TensorPtr frozen_normal(num::Shape shape, Rng& rng, double std) {
    std::vector<double> v(num::shape_numel(shape));
    for (double& x : v) x = rng.truncated_normal(std);
    return Tensor::make(std::move(shape), std::move(v), false);
}

TensorPtr sincos_posenc(const Config& cfg) {
    const int side = cfg.tokens_per_side();
    const int n = cfg.num_tokens();
    const int d = cfg.embed_dim;
    const int quarter = d / 4;
    std::vector<double> pe(static_cast<std::size_t>(n) * d);
    for (int gy = 0; gy < side; ++gy) {
        for (int gx = 0; gx < side; ++gx) {
            double* row = pe.data() + static_cast<std::size_t>(gy * side + gx) * d;
            for (int i = 0; i < quarter; ++i) {
                const double denom = quarter > 1 ? static_cast<double>(quarter - 1) : 1.0;
                const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / denom);
                row[i] = std::sin(gx * omega);
                row[quarter + i] = std::cos(gx * omega);
                row[2 * quarter + i] = std::sin(gy * omega);
                row[3 * quarter + i] = std::cos(gy * omega);
            }
            for (int i = 0; i < d; ++i) row[i] *= cfg.posenc_scale;
        }
    }
    return Tensor::make({static_cast<std::size_t>(n), static_cast<std::size_t>(d)}, std::move(pe),
                        false);
}

}  // namespace

Encoder::Encoder(const Config& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "backbone_init"));
    const auto d = static_cast<std::size_t>(cfg_.embed_dim);
    const auto pd = static_cast<std::size_t>(cfg_.patch_dim());
    const auto hidden = static_cast<std::size_t>(cfg_.mlp_hidden());

    patch_w_ = frozen_normal({pd, d}, rng, 1.0 / std::sqrt(static_cast<double>(pd)));
    patch_b_ = Tensor::zeros({d});
    posenc_ = sincos_posenc(cfg_);

    layers_.reserve(cfg_.num_layers);
    for (int l = 0; l < cfg_.num_layers; ++l) {
        LayerParams p;
        p.ln1_gain = Tensor::full({d}, 1.0);
        p.ln1_bias = Tensor::zeros({d});
        p.wq = frozen_normal({d, d}, rng, cfg_.init_std);
        p.bq = Tensor::zeros({d});
        p.wk = frozen_normal({d, d}, rng, cfg_.init_std);
        p.bk = Tensor::zeros({d});
        p.wv = frozen_normal({d, d}, rng, cfg_.init_std);
        p.bv = Tensor::zeros({d});
        p.wo = frozen_normal({d, d}, rng, cfg_.init_std);
        p.bo = Tensor::zeros({d});
        p.ln2_gain = Tensor::full({d}, 1.0);
        p.ln2_bias = Tensor::zeros({d});
        p.w1 = frozen_normal({d, hidden}, rng, cfg_.init_std);
        p.b1 = Tensor::zeros({hidden});
        p.w2 = frozen_normal({hidden, d}, rng, cfg_.init_std);
        p.b2 = Tensor::zeros({d});
        layers_.push_back(std::move(p));
    }
}

TensorPtr Encoder::content_tokens(const Raster& img) const {
    if (img.height != cfg_.image_size || img.width != cfg_.image_size)
        throw ConfigError("patchify: image " + std::to_string(img.height) + "x" +
                          std::to_string(img.width) + " does not match configured size " +
                          std::to_string(cfg_.image_size));
    const int side = cfg_.tokens_per_side();
    const int ps = cfg_.patch_size;
    const auto n = static_cast<std::size_t>(cfg_.num_tokens());
    const auto pd = static_cast<std::size_t>(cfg_.patch_dim());
    std::vector<double> patches(n * pd);
    for (int gy = 0; gy < side; ++gy) {
        for (int gx = 0; gx < side; ++gx) {
            double* dst = patches.data() + (static_cast<std::size_t>(gy) * side + gx) * pd;
            for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                    dst[py * ps + px] = img.at(gy * ps + py, gx * ps + px);
        }
    }
    auto pm = Tensor::make({n, pd}, std::move(patches));
    return num::add(num::matmul(pm, patch_w_), patch_b_);
}

TensorPtr Encoder::patchify(const Raster& img) const {
    return num::add(content_tokens(img), posenc_);
}

TensorPtr Encoder::layer_forward(int layer_index, const TensorPtr& tokens) const {
    if (layer_index < 0 || layer_index >= cfg_.num_layers)
        throw ContractError("layer_forward: layer " + std::to_string(layer_index) + " out of range");
    const LayerParams& p = layers_[static_cast<std::size_t>(layer_index)];
    const std::size_t dh = static_cast<std::size_t>(cfg_.head_dim());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto h = num::layernorm(tokens, p.ln1_gain, p.ln1_bias, 1e-5);
    auto q = num::add(num::matmul(h, p.wq), p.bq);
    auto k = num::add(num::matmul(h, p.wk), p.bk);
    auto v = num::add(num::matmul(h, p.wv), p.bv);

    std::vector<TensorPtr> head_ctx;
    head_ctx.reserve(cfg_.num_heads);
    for (int hd = 0; hd < cfg_.num_heads; ++hd) {
        const std::size_t c0 = hd * dh, c1 = (hd + 1) * dh;
        auto qh = num::slice_cols(q, c0, c1);
        auto kh = num::slice_cols(k, c0, c1);
        auto vh = num::slice_cols(v, c0, c1);
        auto scores = num::scale(num::matmul_nt(qh, kh), inv_sqrt_dh);
        auto attn = num::softmax(scores, 1);
        head_ctx.push_back(num::matmul(attn, vh));
    }
    auto ctx = num::concat_cols(head_ctx);
    auto x = num::add(tokens, num::add(num::matmul(ctx, p.wo), p.bo));

    auto m = num::layernorm(x, p.ln2_gain, p.ln2_bias, 1e-5);
    auto ff = num::add(num::matmul(num::gelu(num::add(num::matmul(m, p.w1), p.b1)), p.w2), p.b2);
    return num::add(x, ff);
}

ForwardResult Encoder::forward(const Raster& img, const TensorPtr& prompts) const {
    if (prompts && (prompts->ndim() != 2 ||
                    prompts->dim(1) != static_cast<std::size_t>(cfg_.embed_dim)))
        throw DimensionError("forward: prompts " + num::shape_str(prompts->shape()) +
                             " must be [K," + std::to_string(cfg_.embed_dim) + "]");
    const auto n = static_cast<std::size_t>(cfg_.num_tokens());
    TensorPtr tokens = patchify(img);
    std::size_t prompt_rows = 0;

    ForwardResult out;
    out.entry_token_counts.reserve(cfg_.num_layers);
    for (int l = 0; l < cfg_.num_layers; ++l) {
        if (prompts && cfg_.injection_layers.count(l)) {
            if (prompt_rows > 0) tokens = num::slice_rows(tokens, prompt_rows, tokens->dim(0));
            tokens = num::concat_rows({prompts, tokens});
            prompt_rows = prompts->dim(0);
        }
        out.entry_token_counts.push_back(static_cast<int>(tokens->dim(0)));
        tokens = layer_forward(l, tokens);
    }
    if (prompt_rows > 0) tokens = num::slice_rows(tokens, prompt_rows, tokens->dim(0));
    if (tokens->dim(0) != n) throw ContractError("forward: patch token count drifted");
    out.final_tokens = tokens;
    out.pooled = num::mean_rows(tokens);
    return out;
}

std::vector<std::pair<std::string, TensorPtr>> Encoder::named_params() const {
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("patch.w", patch_w_);
    out.emplace_back("patch.b", patch_b_);
    out.emplace_back("posenc", posenc_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const LayerParams& p = layers_[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        out.emplace_back(pre + "ln1.gain", p.ln1_gain);
        out.emplace_back(pre + "ln1.bias", p.ln1_bias);
        out.emplace_back(pre + "wq", p.wq);
        out.emplace_back(pre + "bq", p.bq);
        out.emplace_back(pre + "wk", p.wk);
        out.emplace_back(pre + "bk", p.bk);
        out.emplace_back(pre + "wv", p.wv);
        out.emplace_back(pre + "bv", p.bv);
        out.emplace_back(pre + "wo", p.wo);
        out.emplace_back(pre + "bo", p.bo);
        out.emplace_back(pre + "ln2.gain", p.ln2_gain);
        out.emplace_back(pre + "ln2.bias", p.ln2_bias);
        out.emplace_back(pre + "w1", p.w1);
        out.emplace_back(pre + "b1", p.b1);
        out.emplace_back(pre + "w2", p.w2);
        out.emplace_back(pre + "b2", p.b2);
    }
    return out;
}

}  // namespace probe::backbone
