#include "probe/detect.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include "probe/model.hpp"
#include "probe/rng.hpp"

namespace probe::detect {

using num::Tensor;
using num::TensorPtr;

DetectionHead::DetectionHead(const HeadConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg_.grid <= 0 || cfg_.in_dim <= 0 || cfg_.num_classes <= 0)
        throw ConfigError("detection head: sizes must be positive");
    Rng rng(derive_seed(seed, "det_head_init"));
    const auto d = static_cast<std::size_t>(cfg_.in_dim);
    const auto m1 = static_cast<std::size_t>(cfg_.mid1_resolved());
    const auto m2 = static_cast<std::size_t>(cfg_.mid2_resolved());
    const auto out = static_cast<std::size_t>(cfg_.out_channels());

    auto init = [&rng](num::Shape shape, double fan_in) {
        std::vector<double> v(num::shape_numel(shape));
        const double std = 1.0 / std::sqrt(fan_in);
        for (double& x : v) x = rng.truncated_normal(std);
        return Tensor::make(std::move(shape), std::move(v), true);
    };
    conv1_w_ = init({3, 3, d, m1}, 9.0 * static_cast<double>(d));
    conv1_b_ = Tensor::zeros({m1}, true);
    bn_gain_ = Tensor::full({m1}, 1.0, true);
    bn_bias_ = Tensor::zeros({m1}, true);
    conv2_w_ = init({m1, m2}, static_cast<double>(m1));
    conv2_b_ = Tensor::zeros({m2}, true);
    pred_w_ = init({m2, out}, static_cast<double>(m2));
    pred_b_ = Tensor::zeros({out}, true);
}

TensorPtr DetectionHead::forward(const TensorPtr& x, bool training) {
    if (x->ndim() != 4 || x->dim(1) != static_cast<std::size_t>(cfg_.grid) ||
        x->dim(2) != static_cast<std::size_t>(cfg_.grid) ||
        x->dim(3) != static_cast<std::size_t>(cfg_.in_dim))
        throw DimensionError("detection head: input " + num::shape_str(x->shape()) +
                             " does not match config grid/in_dim");
    auto h = num::conv3x3(x, conv1_w_, conv1_b_);
    h = num::batchnorm(h, bn_gain_, bn_bias_, bn_, training);
    h = num::gelu(h);
    h = num::gelu(num::conv1x1(h, conv2_w_, conv2_b_));
    return num::conv1x1(h, pred_w_, pred_b_);
}

ParameterCounts DetectionHead::parameter_counts() const {
    ParameterCounts c;
    c.conv1_weights = conv1_w_->numel();
    c.conv2_weights = conv2_w_->numel();
    c.pred_weights = pred_w_->numel();
    c.weights_total = c.conv1_weights + c.conv2_weights + c.pred_weights;
    c.biases_total = conv1_b_->numel() + conv2_b_->numel() + pred_b_->numel();
    c.bn_affine = bn_gain_->numel() + bn_bias_->numel();
    return c;
}

std::vector<std::pair<std::string, TensorPtr>> DetectionHead::named_params() const {
    return {{"conv1.w", conv1_w_}, {"conv1.b", conv1_b_}, {"bn.gain", bn_gain_},
            {"bn.bias", bn_bias_}, {"conv2.w", conv2_w_}, {"conv2.b", conv2_b_},
            {"pred.w", pred_w_},   {"pred.b", pred_b_}};
}

TensorPtr tokens_to_grid(const TensorPtr& final_tokens, int grid) {
    if (final_tokens->ndim() != 2)
        throw DimensionError("tokens_to_grid: expects [N,D], got " +
                             num::shape_str(final_tokens->shape()));
    const auto n = final_tokens->dim(0);
    const auto g = static_cast<std::size_t>(grid);
    if (n != g * g)
        throw DimensionError("tokens_to_grid: N=" + std::to_string(n) + " is not " +
                             std::to_string(grid) + "^2");
    return num::reshape(final_tokens, {g, g, final_tokens->dim(1)});
}

TargetGrid assign_targets(const datagen::LabeledScene& scene, const HeadConfig& cfg,
                          const std::string& scene_label) {
    const int g = cfg.grid;
    TargetGrid t;
    t.grid = g;
    const auto cells = static_cast<std::size_t>(g) * static_cast<std::size_t>(g);
    t.class_id.assign(cells, -1);
    t.dx.assign(cells, 0.0);
    t.dy.assign(cells, 0.0);
    t.dw.assign(cells, 0.0);
    t.dh.assign(cells, 0.0);
    t.gt_box.assign(cells, Box{});

    for (const auto& [cls, box] : scene.boxes) {
        if (!(box.area() > 0.0))
            throw DataError("assign_targets: zero-area box in scene " +
                            (scene_label.empty() ? std::to_string(scene.scene_seed) : scene_label));
        const double cx = box.cx() * g;
        const double cy = box.cy() * g;
        int gx = std::min(g - 1, static_cast<int>(cx));
        int gy = std::min(g - 1, static_cast<int>(cy));
        const auto cell = static_cast<std::size_t>(gy) * g + gx;
        if (t.class_id[cell] >= 0) {
            const Box& held = t.gt_box[cell];
            const bool replace =
                box.area() > held.area() ||
                (box.area() == held.area() &&
                 std::tie(cls, box.x_min, box.y_min, box.x_max, box.y_max) <
                     std::tie(t.class_id[cell], held.x_min, held.y_min, held.x_max, held.y_max));
            if (!replace) continue;
        }
        t.class_id[cell] = cls;
        t.dx[cell] = cx - gx;
        t.dy[cell] = cy - gy;
        t.dw[cell] = std::log(box.width());
        t.dh[cell] = std::log(box.height());
        t.gt_box[cell] = box;
    }
    return t;
}

TensorPtr focal_loss(const TensorPtr& class_logits, const std::vector<TargetGrid>& targets,
                     double alpha, double gamma) {
    if (class_logits->ndim() != 4)
        throw DimensionError("focal_loss: expects [B,G,G,C] logits");
    const std::size_t b = class_logits->dim(0);
    const std::size_t g = class_logits->dim(1);
    const std::size_t c = class_logits->dim(3);
    if (targets.size() != b) throw ContractError("focal_loss: target batch size mismatch");

    std::vector<double> one_hot(class_logits->numel(), 0.0);
    std::vector<double> alpha_t(class_logits->numel(), 1.0 - alpha);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t cell = 0; cell < g * g; ++cell) {
            const int cls = targets[i].class_id[cell];
            if (cls < 0) continue;
            const std::size_t at = (i * g * g + cell) * c + static_cast<std::size_t>(cls);
            one_hot[at] = 1.0;
            alpha_t[at] = alpha;
        }
    }
    auto t = Tensor::make(class_logits->shape(), std::move(one_hot));
    auto at = Tensor::make(class_logits->shape(), std::move(alpha_t));
    auto ones = Tensor::full(class_logits->shape(), 1.0);

    auto p = num::clamp(num::sigmoid(class_logits), 1e-7, 1.0 - 1e-7);
    auto p_t = num::add(num::mul(p, t), num::mul(num::sub(ones, p), num::sub(ones, t)));
    auto term = num::mul(at, num::mul(num::pow_const(num::sub(ones, p_t), gamma), num::log(p_t)));
    const double cells = static_cast<double>(b * g * g);
    return num::scale(num::sum(term), -1.0 / cells);
}

TensorPtr giou_loss(const TensorPtr& pred_box, const Box& gt) {
    if (pred_box->numel() != 4) throw DimensionError("giou_loss: pred box must have 4 entries");
    gt.require_valid("giou_loss");
    {
        const double* p = pred_box->data();
        if (!(p[0] < p[2] && p[1] < p[3])) throw ContractError("giou_loss: invalid predicted box");
    }
    auto coord = [&](std::size_t i) { return num::slice_rows(pred_box, i, i + 1); };
    auto c = [](double v) { return Tensor::full({1}, v); };
    auto x0 = coord(0), y0 = coord(1), x1 = coord(2), y1 = coord(3);

    auto zero = c(0.0);
    auto iw = num::maximum(num::sub(num::minimum(x1, c(gt.x_max)), num::maximum(x0, c(gt.x_min))), zero);
    auto ih = num::maximum(num::sub(num::minimum(y1, c(gt.y_max)), num::maximum(y0, c(gt.y_min))), zero);
    auto inter = num::mul(iw, ih);
    auto area_pred = num::mul(num::sub(x1, x0), num::sub(y1, y0));
    auto uni = num::sub(num::add(area_pred, c(gt.area())), inter);
    auto ew = num::sub(num::maximum(x1, c(gt.x_max)), num::minimum(x0, c(gt.x_min)));
    auto eh = num::sub(num::maximum(y1, c(gt.y_max)), num::minimum(y0, c(gt.y_min)));
    auto enclosure = num::mul(ew, eh);
    auto giou = num::sub(num::div(inter, uni), num::div(num::sub(enclosure, uni), enclosure));
    return num::reshape(num::sub(c(1.0), giou), {});
}

DetectionLoss detection_loss(const TensorPtr& pred, const std::vector<TargetGrid>& targets,
                             double alpha, double gamma) {
    if (pred->ndim() != 4) throw DimensionError("detection_loss: expects [B,G,G,C+4]");
    const std::size_t b = pred->dim(0);
    const std::size_t g = pred->dim(1);
    const std::size_t ch = pred->dim(3);
    const std::size_t c = ch - 4;
    if (targets.size() != b) throw ContractError("detection_loss: target batch size mismatch");

    auto flat = num::reshape(pred, {b * g * g, ch});
    auto logits = num::reshape(num::slice_cols(flat, 0, c), {b, g, g, c});
    DetectionLoss out;
    out.focal = focal_loss(logits, targets, alpha, gamma);

    const double inv_g = 1.0 / static_cast<double>(g);
    TensorPtr giou_sum = Tensor::scalar(0.0);
    int positives = 0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t cell = 0; cell < g * g; ++cell) {
            if (!targets[i].positive(static_cast<int>(cell))) continue;
            const std::size_t gx = cell % g, gy = cell / g;
            auto row = num::reshape(num::slice_rows(flat, i * g * g + cell, i * g * g + cell + 1),
                                    {ch});
            auto box_par = num::slice_rows(row, c, c + 4);
            auto dx = num::slice_rows(box_par, 0, 1);
            auto dy = num::slice_rows(box_par, 1, 2);
            auto dw = num::slice_rows(box_par, 2, 3);
            auto dh = num::slice_rows(box_par, 3, 4);
            auto cx = num::scale(num::add_scalar(dx, static_cast<double>(gx)), inv_g);
            auto cy = num::scale(num::add_scalar(dy, static_cast<double>(gy)), inv_g);
            auto w = num::exp(num::clamp(dw, -12.0, 1.5));
            auto h = num::exp(num::clamp(dh, -12.0, 1.5));
            auto box = num::concat_rows({num::sub(cx, num::scale(w, 0.5)),
                                         num::sub(cy, num::scale(h, 0.5)),
                                         num::add(cx, num::scale(w, 0.5)),
                                         num::add(cy, num::scale(h, 0.5))});
            giou_sum = num::add(giou_sum, giou_loss(box, targets[i].gt_box[cell]));
            ++positives;
        }
    }
    out.giou = positives > 0 ? num::scale(giou_sum, 1.0 / positives) : giou_sum;
    out.total = num::add(out.focal, out.giou);
    return out;
}

namespace {
double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace

std::vector<Detection> decode(const num::Tensor& pred_grid, double threshold,
                              const HeadConfig& cfg, double nms_iou) {
    const auto g = static_cast<std::size_t>(cfg.grid);
    const auto c = static_cast<std::size_t>(cfg.num_classes);
    if (pred_grid.ndim() != 3 || pred_grid.dim(0) != g || pred_grid.dim(1) != g ||
        pred_grid.dim(2) != c + 4)
        throw DimensionError("decode: grid shape " + num::shape_str(pred_grid.shape()) +
                             " does not match config");
    std::vector<Detection> dets;
    const double* p = pred_grid.data();
    for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
            const double* cell = p + (gy * g + gx) * (c + 4);
            std::size_t best = 0;
            for (std::size_t k = 1; k < c; ++k)
                if (cell[k] > cell[best]) best = k;
            const double score = sigmoid_value(cell[best]);
            if (score <= threshold) continue;
            const double cx = (static_cast<double>(gx) + cell[c + 0]) / static_cast<double>(g);
            const double cy = (static_cast<double>(gy) + cell[c + 1]) / static_cast<double>(g);
            const double w = std::exp(std::min(cell[c + 2], 1.5));
            const double h = std::exp(std::min(cell[c + 3], 1.5));
            Detection d;
            d.class_id = static_cast<int>(best);
            d.score = score;
            d.box.x_min = std::max(0.0, cx - 0.5 * w);
            d.box.y_min = std::max(0.0, cy - 0.5 * h);
            d.box.x_max = std::min(1.0, cx + 0.5 * w);
            d.box.y_max = std::min(1.0, cy + 0.5 * h);
            if (!d.box.valid()) continue;
            dets.push_back(d);
        }
    }
    return nms(std::move(dets), nms_iou);
}

namespace {
bool det_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return std::tie(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
           std::tie(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
}

double box_iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) return 0.0;
    return inter / (a.area() + b.area() - inter);
}
}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::sort(dets.begin(), dets.end(), det_order);
    std::vector<Detection> kept;
    std::vector<char> suppressed(dets.size(), 0);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (suppressed[i]) continue;
        kept.push_back(dets[i]);
        for (std::size_t j = i + 1; j < dets.size(); ++j) {
            if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (box_iou(dets[i].box, dets[j].box) > iou_threshold) suppressed[j] = 1;
        }
    }
    return kept;
}

// ---------------------------------------------------------------------------
// head training on frozen features

namespace {

// Final patch tokens for each scene through the frozen encoder with the
// cached (detached) prompts; computed once and reused every epoch.
std::vector<std::vector<double>> cache_features(ModelState& model,
                                                const std::vector<datagen::LabeledScene>& scenes) {
    std::vector<std::vector<double>> feats;
    feats.reserve(scenes.size());
    const TensorPtr prompts = model.prompt_cache();
    for (const auto& s : scenes) {
        auto out = model.encoder->forward(s.image, prompts);
        feats.push_back(out.final_tokens->values());
    }
    return feats;
}

}  // namespace

std::vector<HeadMetricsRow> train_head(ModelState& model,
                                       const std::vector<datagen::LabeledScene>& scenes,
                                       const TrainHeadOptions& opt,
                                       const std::string& metrics_csv_path) {
    if (scenes.empty()) throw ContractError("train_head: no labeled scenes");
    const backbone::Config& bc = model.encoder->config();
    HeadConfig hc;
    hc.grid = bc.tokens_per_side();
    hc.in_dim = bc.embed_dim;
    hc.mid1 = opt.mid1;
    hc.mid2 = opt.mid2;
    hc.num_classes = opt.num_classes;
    if (!model.det_head) model.det_head.emplace(hc, derive_seed(model.opt.master_seed, "det_head"));
    DetectionHead& head = *model.det_head;

    const auto g = static_cast<std::size_t>(hc.grid);
    const auto d = static_cast<std::size_t>(hc.in_dim);
    std::vector<std::vector<double>> feats = cache_features(model, scenes);
    std::vector<TargetGrid> targets;
    targets.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i)
        targets.push_back(assign_targets(scenes[i], hc, "index " + std::to_string(i)));

    pretrain::AdamW optimizer(opt.adamw);
    optimizer.register_params(head.named_params());

    std::ofstream csv;
    if (!metrics_csv_path.empty()) {
        csv.open(metrics_csv_path, std::ios::trunc);
        if (!csv) throw IoError("train_head: cannot open " + metrics_csv_path);
        csv << head_csv_header() << "\n";
    }

    std::vector<HeadMetricsRow> rows;
    std::vector<std::size_t> order(scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const int batch = std::max(1, opt.batch_size);

    for (int epoch = 1; epoch <= opt.schedule.total_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(model.opt.master_seed, "head_shuffle", epoch));
        shuffle_rng.shuffle(order);
        const double lr = pretrain::lr_at(epoch - 1, opt.schedule);

        HeadMetricsRow row;
        row.epoch = epoch;
        row.lr = lr;
        int steps = 0;
        for (std::size_t start = 0; start + batch <= order.size(); start += batch) {
            std::vector<TensorPtr> grids;
            std::vector<TargetGrid> batch_targets;
            for (int k = 0; k < batch; ++k) {
                const std::size_t idx = order[start + k];
                grids.push_back(Tensor::make({g, g, d}, feats[idx]));
                batch_targets.push_back(targets[idx]);
            }
            auto x = num::stack0(grids);
            auto pred = head.forward(x, true);
            DetectionLoss loss = detection_loss(pred, batch_targets, opt.focal_alpha,
                                                opt.focal_gamma);
            num::backward(loss.total);
            optimizer.step(lr);
            optimizer.zero_grad();
            row.loss_focal += loss.focal->item();
            row.loss_giou += loss.giou->item();
            row.loss_total += loss.total->item();
            ++steps;
            num::Graph::active().clear();
        }
        if (steps > 0) {
            row.loss_focal /= steps;
            row.loss_giou /= steps;
            row.loss_total /= steps;
        }
        rows.push_back(row);
        if (csv.is_open()) csv << format_head_row(row) << "\n";
        if (opt.verbose)
            std::printf("head epoch %d lr %.3g loss %.6f\n", epoch, lr, row.loss_total);
    }
    return rows;
}

std::vector<std::vector<Detection>> run_detector(ModelState& model,
                                                 const std::vector<datagen::LabeledScene>& scenes,
                                                 double conf_threshold, double nms_iou) {
    if (!model.det_head) throw StateError("run_detector: no trained detection head");
    DetectionHead& head = *model.det_head;
    const HeadConfig& hc = head.config();
    const auto g = static_cast<std::size_t>(hc.grid);
    const TensorPtr prompts = model.prompt_cache();

    std::vector<std::vector<Detection>> out;
    out.reserve(scenes.size());
    for (const auto& s : scenes) {
        auto tokens = model.encoder->forward(s.image, prompts).final_tokens;
        auto grid = tokens_to_grid(tokens, hc.grid);
        auto x = num::reshape(grid, {1, g, g, grid->dim(2)});
        auto pred = head.forward(x, false);
        auto single = num::reshape(pred, {g, g, static_cast<std::size_t>(hc.out_channels())});
        out.push_back(decode(*single, conf_threshold, hc, nms_iou));
        num::Graph::active().clear();
    }
    return out;
}

const char* head_csv_header() { return "epoch,lr,loss_focal,loss_giou,loss_total"; }

std::string format_head_row(const HeadMetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g", r.epoch, r.lr, r.loss_focal,
                  r.loss_giou, r.loss_total);
    return buf;
}

}  // namespace probe::detect
