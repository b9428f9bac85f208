#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "probe/box.hpp"
#include "probe/datagen.hpp"
#include "probe/ops.hpp"
#include "probe/optim.hpp"
#include "probe/tensor.hpp"

namespace probe {
struct ModelState;
}

namespace probe::detect {

struct HeadConfig {
    int grid = 8;         // G = image / patch
    int in_dim = 64;      // D
    int mid1 = 0;         // 0 -> D / 2
    int mid2 = 0;         // 0 -> min(128, D / 4)
    int num_classes = 3;  // C

    int mid1_resolved() const { return mid1 > 0 ? mid1 : in_dim / 2; }
    int mid2_resolved() const { return mid2 > 0 ? mid2 : std::min(128, in_dim / 4); }
    int out_channels() const { return num_classes + 4; }
};

struct Detection {
    Box box;
    int class_id = 0;
    double score = 0.0;
};

// Per-cell assignment targets: class id (-1 background), within-cell center
// offsets in [0,1), log sizes, and the originating ground-truth box.
struct TargetGrid {
    int grid = 0;
    std::vector<int> class_id;
    std::vector<double> dx, dy, dw, dh;
    std::vector<Box> gt_box;

    bool positive(int cell) const { return class_id[static_cast<std::size_t>(cell)] >= 0; }
};

struct ParameterCounts {
    std::size_t conv1_weights = 0;
    std::size_t conv2_weights = 0;
    std::size_t pred_weights = 0;
    std::size_t weights_total = 0;
    std::size_t biases_total = 0;
    std::size_t bn_affine = 0;
};

// Conv3x3 + BN + GELU, Conv1x1 + GELU, Conv1x1 predictor producing C+4
// channels per cell.
class DetectionHead {
public:
    DetectionHead(const HeadConfig& cfg, std::uint64_t seed);

    const HeadConfig& config() const { return cfg_; }

    // x: [B,G,G,D] -> [B,G,G,C+4]; batch statistics while training, running
    // averages at inference.
    num::TensorPtr forward(const num::TensorPtr& x, bool training);

    ParameterCounts parameter_counts() const;
    std::vector<std::pair<std::string, num::TensorPtr>> named_params() const;

    num::BatchNormState& bn_state() { return bn_; }
    const num::BatchNormState& bn_state() const { return bn_; }

private:
    HeadConfig cfg_;
    num::TensorPtr conv1_w_, conv1_b_;
    num::TensorPtr bn_gain_, bn_bias_;
    num::TensorPtr conv2_w_, conv2_b_;
    num::TensorPtr pred_w_, pred_b_;
    num::BatchNormState bn_;
};

// [N,D] -> [G,G,D] row-major; N must equal G^2.
num::TensorPtr tokens_to_grid(const num::TensorPtr& final_tokens, int grid);

// Center cell assignment; at most one object per cell, larger area wins
// (exact ties resolved lexicographically so input order never matters).
// `scene_label` only decorates error messages.
TargetGrid assign_targets(const datagen::LabeledScene& scene, const HeadConfig& cfg,
                          const std::string& scene_label = "");

// Mean over cells of the class-summed focal terms.
num::TensorPtr focal_loss(const num::TensorPtr& class_logits /*[B,G,G,C]*/,
                          const std::vector<TargetGrid>& targets, double alpha, double gamma);

// 1 - GIoU of one predicted box (graph scalars [x0,y0,x1,y1]) against a
// fixed ground-truth box.
num::TensorPtr giou_loss(const num::TensorPtr& pred_box /*[4]*/, const Box& gt);

struct DetectionLoss {
    num::TensorPtr focal;
    num::TensorPtr giou;
    num::TensorPtr total;
};

// Focal over all cells plus mean GIoU loss over positive cells of the batch.
DetectionLoss detection_loss(const num::TensorPtr& pred /*[B,G,G,C+4]*/,
                             const std::vector<TargetGrid>& targets, double alpha, double gamma);

// Per-cell max-class sigmoid thresholding, box decoding, then greedy
// per-class NMS; result sorted by descending score.
std::vector<Detection> decode(const num::Tensor& pred_grid /*[G,G,C+4]*/, double threshold,
                              const HeadConfig& cfg, double nms_iou = 0.5);

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

struct TrainHeadOptions {
    pretrain::OptimSchedule schedule{1e-4, 0, 20};  // cosine without warm-up
    pretrain::AdamWConfig adamw;
    int batch_size = 8;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    int mid1 = 0;  // 0 -> derived from embed dim
    int mid2 = 0;
    int num_classes = datagen::kNumClasses;
    bool verbose = false;
};

struct HeadMetricsRow {
    int epoch = 0;
    double lr = 0.0;
    double loss_focal = 0.0;
    double loss_giou = 0.0;
    double loss_total = 0.0;
};

// Optimizes only the head on labeled scenes; backbone and prompts stay
// byte-identical (features are computed once through the frozen encoder with
// the cached prompts and reused every epoch).
std::vector<HeadMetricsRow> train_head(ModelState& model,
                                       const std::vector<datagen::LabeledScene>& scenes,
                                       const TrainHeadOptions& opt,
                                       const std::string& metrics_csv_path = "");

// Frozen-model inference over a scene list.
std::vector<std::vector<Detection>> run_detector(ModelState& model,
                                                 const std::vector<datagen::LabeledScene>& scenes,
                                                 double conf_threshold, double nms_iou);

const char* head_csv_header();
std::string format_head_row(const HeadMetricsRow& row);

}  // namespace probe::detect
