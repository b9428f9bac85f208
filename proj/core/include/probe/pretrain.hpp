#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "probe/dapa.hpp"
#include "probe/datagen.hpp"
#include "probe/mlp.hpp"
#include "probe/optim.hpp"
#include "probe/raster.hpp"
#include "probe/spem.hpp"
#include "probe/tensor.hpp"

namespace probe {
struct ModelState;
}

namespace probe::pretrain {

struct AugmentConfig {
    double crop_min_scale = 0.6;
    double crop_max_scale = 1.0;
    double flip_prob = 0.5;
    double brightness = 0.15;
    double contrast = 0.15;
    double noise_sigma = 0.02;
};

// Two stochastic views: random resized crop, horizontal flip, contrast and
// brightness jitter, additive Gaussian noise, clamped to [0,1].
// Deterministic per (image, config, seed).
std::pair<Raster, Raster> augment_pair(const Raster& img, const AugmentConfig& cfg,
                                       std::uint64_t seed);

// Projector g (D -> D -> d_ssl) and predictor h (d_ssl -> d_ssl/2 -> d_ssl).
struct SslHeads {
    Mlp projector;
    Mlp predictor;

    static SslHeads init(int embed_dim, int ssl_dim, std::uint64_t seed);
    static SslHeads identity();

    std::vector<std::pair<std::string, num::TensorPtr>> named_params() const;
};

// One-sided term: -sim(h(g(online)), stop_gradient(g(target))).
num::TensorPtr simsiam_branch(const num::TensorPtr& online_pooled,
                              const num::TensorPtr& target_pooled, const SslHeads& heads);

// Symmetrized SimSiam loss for one pair of pooled views; range [-1, 0].
num::TensorPtr simsiam_loss(const num::TensorPtr& view1_pooled,
                            const num::TensorPtr& view2_pooled, const SslHeads& heads);

struct LossWeights {
    double lambda1 = 1.0;  // prompt consistency
    double lambda2 = 0.5;  // alignment
};

num::TensorPtr total_loss(const num::TensorPtr& l_ssl, const num::TensorPtr& l_prompt,
                          const num::TensorPtr& l_dapa, const LossWeights& w);

struct MetricsRow {
    int epoch = 0;
    double lr = 0.0;
    double loss_ssl = 0.0;
    double loss_prompt = 0.0;
    double loss_dapa = 0.0;
    double loss_total = 0.0;
    double mmd_eval = 0.0;
};

struct PretrainOptions {
    LossWeights weights;
    OptimSchedule schedule;
    AdamWConfig adamw;
    AugmentConfig augment;
    spem::SpemConfig spem;
    int batch_size = 8;
    int images_per_domain = 0;  // 0 = use all
    bool build_bank = true;     // prototype bank + prompt injection
    int checkpoint_interval = 10;
    int stop_after_epoch = 0;  // abort after this epoch (0 = run to the end)
    bool verbose = false;
};

using CheckpointFn = std::function<void(ModelState&, const OptimizerSnapshot&, int)>;

// Algorithm: build the prompt bank once (when enabled), then per epoch draw
// paired source/target mini-batches, inject prompts, combine the SSL,
// prompt-consistency and alignment losses, and update {theta_p, g, h, f_p}
// with AdamW while the backbone stays frozen. Appends one CSV row per epoch
// (and an epoch-0 row evaluated before any update when starting fresh).
std::vector<MetricsRow> run_pretraining(ModelState& model,
                                        const std::vector<datagen::LabeledScene>& source,
                                        const std::vector<datagen::LabeledScene>& target,
                                        const PretrainOptions& opt,
                                        const std::string& metrics_csv_path,
                                        int start_epoch = 0,
                                        OptimizerSnapshot* optimizer_state = nullptr,
                                        const CheckpointFn& on_checkpoint = nullptr);

// Linear-kernel MMD between pooled source/target features under the current
// prompts; the per-epoch mmd_eval column.
double evaluate_feature_mmd(const ModelState& model,
                            const std::vector<datagen::LabeledScene>& source,
                            const std::vector<datagen::LabeledScene>& target);

const char* metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

}  // namespace probe::pretrain
