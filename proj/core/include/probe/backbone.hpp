#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "probe/raster.hpp"
#include "probe/rng.hpp"
#include "probe/tensor.hpp"

namespace probe::backbone {

struct Config {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 64;
    int num_layers = 6;
    int num_heads = 4;
    double mlp_ratio = 4.0;
    std::set<int> injection_layers = {0, 3};
    int channels = 1;
    double init_std = 0.02;
    double posenc_scale = 0.25;

    int tokens_per_side() const { return image_size / patch_size; }
    int num_tokens() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return embed_dim / num_heads; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }

    void validate() const;

    static Config desk_default() { return Config{}; }

    // ViT-B/16 geometry; instantiable but not trained at desk scale.
    static Config vit_b16() {
        Config c;
        c.image_size = 224;
        c.patch_size = 16;
        c.embed_dim = 768;
        c.num_layers = 12;
        c.num_heads = 12;
        c.injection_layers = {0, 6};
        return c;
    }
};

// One pre-norm transformer layer's parameters.
struct LayerParams {
    num::TensorPtr ln1_gain, ln1_bias;
    num::TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    num::TensorPtr ln2_gain, ln2_bias;
    num::TensorPtr w1, b1, w2, b2;
};

struct ForwardResult {
    num::TensorPtr final_tokens;  // [N,D], prompt rows stripped
    num::TensorPtr pooled;        // [D], mean over patch tokens
    std::vector<int> entry_token_counts;  // tokens entering each layer
};

// ViT-style encoder, frozen by construction: every parameter is created with
// requires_grad=false and nothing in the library ever updates it. Prompt
// tokens are concatenated ahead of the patch tokens at each injection layer,
// replacing prompt rows propagated from earlier layers.
class Encoder {
public:
    Encoder(const Config& cfg, std::uint64_t seed);

    const Config& config() const { return cfg_; }

    // Patch projection plus fixed sinusoidal position encodings; [N,D].
    num::TensorPtr patchify(const Raster& img) const;

    // Patch projection without position encodings, used when harvesting
    // embeddings for prototype discovery.
    num::TensorPtr content_tokens(const Raster& img) const;

    // Pre-norm MHSA + MLP with residuals; prompt rows attend like patch rows.
    num::TensorPtr layer_forward(int layer_index, const num::TensorPtr& tokens) const;

    // prompts: optional [K,D]; nullptr runs a plain ViT.
    ForwardResult forward(const Raster& img, const num::TensorPtr& prompts) const;

    std::vector<std::pair<std::string, num::TensorPtr>> named_params() const;

private:
    Config cfg_;
    num::TensorPtr patch_w_, patch_b_;
    num::TensorPtr posenc_;
    std::vector<LayerParams> layers_;
};

}  // namespace probe::backbone
