#include "probe/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "probe/model.hpp"
#include "probe/ops.hpp"

namespace probe::pretrain {

using num::Tensor;
using num::TensorPtr;

// ---------------------------------------------------------------------------
// augmentation

namespace {

Raster crop_resize(const Raster& img, int side, int x0, int y0) {
    const int s = img.height;
    if (side == s && x0 == 0 && y0 == 0) return img;
    Raster out(s, s);
    const double ratio = static_cast<double>(side) / static_cast<double>(s);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const double sx = (x + 0.5) * ratio - 0.5 + x0;
            const double sy = (y + 0.5) * ratio - 0.5 + y0;
            const int ix = static_cast<int>(std::floor(sx));
            const int iy = static_cast<int>(std::floor(sy));
            const double fx = sx - ix;
            const double fy = sy - iy;
            auto sample = [&](int yy, int xx) {
                yy = std::min(s - 1, std::max(0, yy));
                xx = std::min(s - 1, std::max(0, xx));
                return img.at(yy, xx);
            };
            out.at(y, x) = (1.0 - fy) * ((1.0 - fx) * sample(iy, ix) + fx * sample(iy, ix + 1)) +
                           fy * ((1.0 - fx) * sample(iy + 1, ix) + fx * sample(iy + 1, ix + 1));
        }
    }
    return out;
}

Raster one_view(const Raster& img, const AugmentConfig& cfg, Rng& rng) {
    const int s = img.height;
    const double area = rng.uniform(cfg.crop_min_scale, cfg.crop_max_scale);
    int side = static_cast<int>(std::lround(s * std::sqrt(area)));
    side = std::min(s, std::max(1, side));
    const int x0 = side < s ? static_cast<int>(rng.uniform_int(s - side + 1)) : 0;
    const int y0 = side < s ? static_cast<int>(rng.uniform_int(s - side + 1)) : 0;
    Raster view = crop_resize(img, side, x0, y0);

    if (rng.uniform() < cfg.flip_prob) {
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s / 2; ++x) std::swap(view.at(y, x), view.at(y, s - 1 - x));
    }
    const double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
    const double brightness = rng.uniform(-cfg.brightness, cfg.brightness);
    for (double& v : view.px) v = (v - 0.5) * contrast + 0.5 + brightness;
    if (cfg.noise_sigma > 0.0)
        for (double& v : view.px) v += cfg.noise_sigma * rng.normal();
    view.clamp01();
    return view;
}

}  // namespace

std::pair<Raster, Raster> augment_pair(const Raster& img, const AugmentConfig& cfg,
                                       std::uint64_t seed) {
    Rng rng(seed);
    Raster v1 = one_view(img, cfg, rng);
    Raster v2 = one_view(img, cfg, rng);
    return {std::move(v1), std::move(v2)};
}

// ---------------------------------------------------------------------------
// SimSiam heads and losses

SslHeads SslHeads::init(int embed_dim, int ssl_dim, std::uint64_t seed) {
    const int d_ssl = ssl_dim > 0 ? ssl_dim : embed_dim;
    SslHeads h;
    Rng rng(seed);
    h.projector = Mlp::init(static_cast<std::size_t>(embed_dim),
                            static_cast<std::size_t>(embed_dim),
                            static_cast<std::size_t>(d_ssl), rng, true);
    h.predictor = Mlp::init(static_cast<std::size_t>(d_ssl),
                            static_cast<std::size_t>(std::max(1, d_ssl / 2)),
                            static_cast<std::size_t>(d_ssl), rng, true);
    return h;
}

SslHeads SslHeads::identity() {
    SslHeads h;
    h.projector = Mlp::make_identity();
    h.predictor = Mlp::make_identity();
    return h;
}

std::vector<std::pair<std::string, TensorPtr>> SslHeads::named_params() const {
    auto out = projector.named_params("ssl.projector");
    auto pred = predictor.named_params("ssl.predictor");
    out.insert(out.end(), pred.begin(), pred.end());
    return out;
}

TensorPtr simsiam_branch(const TensorPtr& online_pooled, const TensorPtr& target_pooled,
                         const SslHeads& heads) {
    auto q = heads.predictor.apply(heads.projector.apply(online_pooled));
    auto z = num::stop_gradient(heads.projector.apply(target_pooled));
    return num::negate(num::cosine_sim(q, z));
}

TensorPtr simsiam_loss(const TensorPtr& view1_pooled, const TensorPtr& view2_pooled,
                       const SslHeads& heads) {
    return num::scale(num::add(simsiam_branch(view1_pooled, view2_pooled, heads),
                               simsiam_branch(view2_pooled, view1_pooled, heads)),
                      0.5);
}

TensorPtr total_loss(const TensorPtr& l_ssl, const TensorPtr& l_prompt, const TensorPtr& l_dapa,
                     const LossWeights& w) {
    return num::add(l_ssl, num::add(num::scale(l_prompt, w.lambda1), num::scale(l_dapa, w.lambda2)));
}

// ---------------------------------------------------------------------------
// training loop

namespace {

Matrix pooled_matrix(const ModelState& model, const std::vector<datagen::LabeledScene>& images,
                     const TensorPtr& prompts) {
    Matrix m(images.size(), static_cast<std::size_t>(model.encoder->config().embed_dim));
    for (std::size_t i = 0; i < images.size(); ++i) {
        auto pooled = model.encoder->forward(images[i].image, prompts).pooled;
        std::copy(pooled->data(), pooled->data() + pooled->numel(), m.row(i));
    }
    return m;
}

}  // namespace

double evaluate_feature_mmd(const ModelState& model,
                            const std::vector<datagen::LabeledScene>& source,
                            const std::vector<datagen::LabeledScene>& target) {
    const TensorPtr prompts = model.prompt_cache();
    return linear_mmd2(pooled_matrix(model, source, prompts),
                       pooled_matrix(model, target, prompts));
}

const char* metrics_csv_header() {
    return "epoch,lr,loss_ssl,loss_prompt,loss_dapa,loss_total,mmd_eval";
}

std::string format_metrics_row(const MetricsRow& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch, r.lr,
                  r.loss_ssl, r.loss_prompt, r.loss_dapa, r.loss_total, r.mmd_eval);
    return buf;
}

std::vector<MetricsRow> run_pretraining(ModelState& model,
                                        const std::vector<datagen::LabeledScene>& source_all,
                                        const std::vector<datagen::LabeledScene>& target_all,
                                        const PretrainOptions& opt,
                                        const std::string& metrics_csv_path, int start_epoch,
                                        OptimizerSnapshot* optimizer_state,
                                        const CheckpointFn& on_checkpoint) {
    if (source_all.empty() || target_all.empty())
        throw ContractError("pretraining: both domains must be non-empty");
    if (opt.batch_size <= 0) throw ConfigError("pretraining: batch_size must be positive");
    if (opt.schedule.total_epochs < start_epoch)
        throw ConfigError("pretraining: start epoch beyond total_epochs");

    auto take = [&](const std::vector<datagen::LabeledScene>& v) {
        if (opt.images_per_domain <= 0 ||
            static_cast<std::size_t>(opt.images_per_domain) >= v.size())
            return v;
        return std::vector<datagen::LabeledScene>(v.begin(), v.begin() + opt.images_per_domain);
    };
    const std::vector<datagen::LabeledScene> source = take(source_all);
    const std::vector<datagen::LabeledScene> target = take(target_all);
    const std::size_t per_domain = std::min(source.size(), target.size());
    const std::size_t batch = std::min<std::size_t>(opt.batch_size, per_domain);
    const std::uint64_t master = model.opt.master_seed;

    if (opt.build_bank && !model.bank) {
        spem::PcaModel pca;
        spem::AssignmentMap assignments;
        model.bank = spem::build_prompt_bank(target, *model.encoder, opt.spem, master, &pca,
                                             &assignments);
        model.pca = std::move(pca);
        model.assignments = std::move(assignments);
    }
    if (model.bank && model.assignments.per_image.size() != target.size()) {
        // resuming from a checkpoint: assignments are recomputed, not stored
        model.assignments = assign_images(*model.pca, model.bank->centroids, *model.encoder,
                                          target);
    }

    AdamW optimizer(opt.adamw);
    if (model.bank) optimizer.register_params(model.bank->projector.named_params("theta_p"));
    optimizer.register_params(model.ssl.named_params());
    optimizer.register_params(model.align_head.named_params("dapa.f_p"));
    if (optimizer_state && !optimizer_state->moments.empty()) optimizer.restore(*optimizer_state);

    std::ofstream csv;
    if (!metrics_csv_path.empty()) {
        csv.open(metrics_csv_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
        if (!csv) throw IoError("pretraining: cannot open " + metrics_csv_path);
        if (start_epoch == 0) csv << metrics_csv_header() << "\n";
    }

    std::vector<MetricsRow> rows;
    auto emit = [&](const MetricsRow& row) {
        rows.push_back(row);
        if (csv.is_open()) {
            csv << format_metrics_row(row) << "\n";
            csv.flush();
        }
        if (opt.verbose)
            std::printf("pretrain epoch %d lr %.3g total %.6f mmd %.6f\n", row.epoch, row.lr,
                        row.loss_total, row.mmd_eval);
    };

    // One epoch of batches. When `update` is false the losses are only
    // evaluated (the epoch-0 row).
    auto run_epoch = [&](int epoch, bool update) {
        MetricsRow row;
        row.epoch = epoch;
        row.lr = lr_at(std::max(0, epoch - 1), opt.schedule);

        std::vector<std::size_t> s_order(per_domain), t_order(per_domain);
        for (std::size_t i = 0; i < per_domain; ++i) s_order[i] = t_order[i] = i;
        Rng s_shuffle(derive_seed(master, "shuffle_source", epoch));
        Rng t_shuffle(derive_seed(master, "shuffle_target", epoch));
        s_shuffle.shuffle(s_order);
        t_shuffle.shuffle(t_order);

        const std::size_t steps = per_domain / batch;
        for (std::size_t step = 0; step < steps; ++step) {
            const TensorPtr prompts = model.bank ? model.bank->project_prompts() : nullptr;

            std::vector<TensorPtr> s_pooled1, t_pooled1;
            std::vector<std::size_t> t_indices;
            TensorPtr l_ssl = Tensor::scalar(0.0);
            int pairs = 0;
            for (int domain = 0; domain < 2; ++domain) {
                const auto& order = domain == 0 ? s_order : t_order;
                const auto& scenes = domain == 0 ? source : target;
                for (std::size_t k = 0; k < batch; ++k) {
                    const std::size_t idx = order[step * batch + k];
                    const auto aug_seed = derive_seed(
                        master, domain == 0 ? "augment_source" : "augment_target",
                        static_cast<std::uint64_t>(epoch) * 1000003ULL + idx);
                    auto [v1, v2] = augment_pair(scenes[idx].image, opt.augment, aug_seed);
                    auto p1 = model.encoder->forward(v1, prompts).pooled;
                    auto p2 = model.encoder->forward(v2, prompts).pooled;
                    l_ssl = num::add(l_ssl, simsiam_loss(p1, p2, model.ssl));
                    ++pairs;
                    if (domain == 0) {
                        s_pooled1.push_back(p1);
                    } else {
                        t_pooled1.push_back(p1);
                        t_indices.push_back(idx);
                    }
                }
            }
            l_ssl = num::scale(l_ssl, 1.0 / pairs);

            TensorPtr l_prompt = Tensor::scalar(0.0);
            if (model.bank) {
                std::vector<TensorPtr> means;
                means.reserve(t_indices.size());
                for (std::size_t idx : t_indices)
                    means.push_back(spem::per_image_prompt_mean(prompts, model.assignments, idx));
                l_prompt = spem::prompt_consistency_loss(t_pooled1, means,
                                                         model.bank->temperature);
            }
            TensorPtr l_dapa = dapa::dapa_loss(num::stack0(s_pooled1), num::stack0(t_pooled1),
                                               model.align_head);
            TensorPtr total = total_loss(l_ssl, l_prompt, l_dapa, opt.weights);

            if (update) {
                num::backward(total);
                optimizer.step(row.lr);
                optimizer.zero_grad();
                if (model.bank) model.bank->refresh_cache();
            }
            row.loss_ssl += l_ssl->item();
            row.loss_prompt += l_prompt->item();
            row.loss_dapa += l_dapa->item();
            row.loss_total += total->item();
            num::Graph::active().clear();
        }
        if (steps > 0) {
            row.loss_ssl /= static_cast<double>(steps);
            row.loss_prompt /= static_cast<double>(steps);
            row.loss_dapa /= static_cast<double>(steps);
            row.loss_total /= static_cast<double>(steps);
        }
        row.mmd_eval = evaluate_feature_mmd(model, source, target);
        return row;
    };

    if (start_epoch == 0) emit(run_epoch(0, false));

    for (int epoch = start_epoch + 1; epoch <= opt.schedule.total_epochs; ++epoch) {
        if (model.bank && opt.spem.refresh_interval > 0 && epoch > 1 &&
            (epoch - 1) % opt.spem.refresh_interval == 0) {
            spem::AssignmentMap refreshed;
            spem::refresh_centroids(*model.bank, target, *model.encoder, *model.pca, opt.spem,
                                    master, &refreshed);
            model.assignments = std::move(refreshed);
        }
        emit(run_epoch(epoch, true));
        model.pretrained_epochs = epoch;
        const bool at_interval =
            opt.checkpoint_interval > 0 && epoch % opt.checkpoint_interval == 0;
        if (on_checkpoint && (at_interval || epoch == opt.schedule.total_epochs)) {
            const OptimizerSnapshot snap = optimizer.snapshot();
            on_checkpoint(model, snap, epoch);
        }
        if (opt.stop_after_epoch > 0 && epoch >= opt.stop_after_epoch) break;
    }
    if (optimizer_state) *optimizer_state = optimizer.snapshot();
    return rows;
}

}  // namespace probe::pretrain
