#include "probe/evalkit.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <set>

#include "probe/rng.hpp"

namespace probe::evalkit {

double iou(const Box& a, const Box& b) {
    a.require_valid("iou");
    b.require_valid("iou");
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) return 0.0;
    return inter / (a.area() + b.area() - inter);
}

namespace {

// Deterministic detection order: score desc, then intrinsic keys so the
// supplied order never matters.
bool pred_order(const PredDet& a, const PredDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return std::tie(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
           std::tie(b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
}

}  // namespace

MatchResult match_detections(std::vector<PredDet> dets, const std::vector<GroundTruth>& gts,
                             double iou_thr) {
    std::sort(dets.begin(), dets.end(), pred_order);
    MatchResult res;
    res.is_tp.assign(dets.size(), 0);
    res.total_gt = gts.size();
    std::vector<char> taken(gts.size(), 0);
    for (std::size_t d = 0; d < dets.size(); ++d) {
        double best_iou = 0.0;
        std::size_t best_g = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].image_id != dets[d].image_id ||
                gts[g].class_id != dets[d].class_id)
                continue;
            const double v = iou(dets[d].box, gts[g].box);
            if (v >= iou_thr && v > best_iou) {
                best_iou = v;
                best_g = g;
            }
        }
        if (best_g < gts.size()) {
            taken[best_g] = 1;
            res.is_tp[d] = 1;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g)
        if (!taken[g]) res.unmatched_gt_per_image[gts[g].image_id]++;
    return res;
}

double average_precision(const std::vector<PredDet>& dets, const std::vector<GroundTruth>& gts,
                         double iou_thr) {
    if (gts.empty()) throw ContractError("average_precision: no ground truth for this class");
    std::vector<PredDet> sorted = dets;
    std::sort(sorted.begin(), sorted.end(), pred_order);
    MatchResult match = match_detections(sorted, gts, iou_thr);

    const double n_gt = static_cast<double>(gts.size());
    std::vector<double> precision, recall;
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (match.is_tp[i])
            tp += 1.0;
        else
            fp += 1.0;
        precision.push_back(tp / (tp + fp));
        recall.push_back(tp / n_gt);
    }
    if (precision.empty()) return 0.0;
    // monotone envelope from the right, exact area under P(R)
    for (std::size_t i = precision.size() - 1; i-- > 0;)
        precision[i] = std::max(precision[i], precision[i + 1]);
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_r) * precision[i];
        prev_r = recall[i];
    }
    return ap;
}

MapSuiteResult map_suite(const std::vector<PredDet>& dets, const std::vector<GroundTruth>& gts,
                         int max_dets_per_image) {
    if (gts.empty()) throw ContractError("map_suite: empty dataset (no ground truth)");

    // cap detections per image by score
    std::vector<PredDet> capped = dets;
    std::sort(capped.begin(), capped.end(), [](const PredDet& a, const PredDet& b) {
        if (a.image_id != b.image_id) return a.image_id < b.image_id;
        return pred_order(a, b);
    });
    std::vector<PredDet> used;
    used.reserve(capped.size());
    int run_image = INT_MIN, run_count = 0;
    for (const PredDet& d : capped) {
        if (d.image_id != run_image) {
            run_image = d.image_id;
            run_count = 0;
        }
        if (run_count < max_dets_per_image) {
            used.push_back(d);
            ++run_count;
        }
    }

    std::set<int> classes;
    for (const auto& g : gts) classes.insert(g.class_id);

    MapSuiteResult out;
    std::vector<double> thresholds;
    for (int t = 0; t < 10; ++t) thresholds.push_back(0.5 + 0.05 * t);

    double ar_acc = 0.0;
    for (int cls : classes) {
        std::vector<PredDet> cls_dets;
        std::vector<GroundTruth> cls_gts;
        for (const auto& d : used)
            if (d.class_id == cls) cls_dets.push_back(d);
        for (const auto& g : gts)
            if (g.class_id == cls) cls_gts.push_back(g);

        out.ap50_per_class[cls] = average_precision(cls_dets, cls_gts, 0.5);
        double ap_acc = 0.0;
        double recall_acc = 0.0;
        for (double thr : thresholds) {
            ap_acc += average_precision(cls_dets, cls_gts, thr);
            MatchResult m = match_detections(cls_dets, cls_gts, thr);
            double tp = 0.0;
            for (char f : m.is_tp) tp += f;
            recall_acc += tp / static_cast<double>(cls_gts.size());
        }
        out.ap5095_per_class[cls] = ap_acc / thresholds.size();
        ar_acc += recall_acc / thresholds.size();

        MatchResult m50 = match_detections(cls_dets, cls_gts, 0.5);
        double tp = 0.0;
        for (char f : m50.is_tp) tp += f;
        out.precision_per_class[cls] =
            cls_dets.empty() ? 0.0 : tp / static_cast<double>(cls_dets.size());
        out.recall_per_class[cls] = tp / static_cast<double>(cls_gts.size());
    }
    const double n_classes = static_cast<double>(classes.size());
    for (auto& [c, v] : out.ap50_per_class) out.map50 += v / n_classes;
    for (auto& [c, v] : out.ap5095_per_class) out.map5095 += v / n_classes;
    out.ar = ar_acc / n_classes;
    return out;
}

// ---------------------------------------------------------------------------
// corruptions

const char* corruption_name(CorruptionCategory c) {
    switch (c) {
        case CorruptionCategory::kNoise: return "noise";
        case CorruptionCategory::kBlur: return "blur";
        case CorruptionCategory::kWeather: return "weather";
        case CorruptionCategory::kDigital: return "digital";
    }
    return "?";
}

CorruptionCategory corruption_from_name(const std::string& name) {
    for (CorruptionCategory c : kAllCorruptions)
        if (name == corruption_name(c)) return c;
    throw ConfigError("unknown corruption category '" + name + "'");
}

namespace {

Raster gaussian_blur(const Raster& img, int radius) {
    const double sigma = std::max(0.5, radius / 2.0);
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += kernel[i + radius];
    }
    for (double& k : kernel) k /= total;

    const int h = img.height, w = img.width;
    Raster tmp(h, w), out(h, w);
    auto clampi = [](int v, int hi) { return std::min(hi - 1, std::max(0, v)); };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * img.at(y, clampi(x + i, w));
            tmp.at(y, x) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp.at(clampi(y + i, h), x);
            out.at(y, x) = acc;
        }
    return out;
}

Raster pixelate(const Raster& img, int factor) {
    const int h = img.height, w = img.width;
    Raster out(h, w);
    for (int by = 0; by < h; by += factor) {
        for (int bx = 0; bx < w; bx += factor) {
            const int y1 = std::min(h, by + factor), x1 = std::min(w, bx + factor);
            double acc = 0.0;
            int count = 0;
            for (int y = by; y < y1; ++y)
                for (int x = bx; x < x1; ++x) {
                    acc += img.at(y, x);
                    ++count;
                }
            const double mean = acc / count;
            for (int y = by; y < y1; ++y)
                for (int x = bx; x < x1; ++x) out.at(y, x) = mean;
        }
    }
    return out;
}

}  // namespace

Raster corrupt(const Raster& img, const CorruptionSpec& spec, std::uint64_t seed) {
    if (spec.severity < 0 || spec.severity > 5)
        throw ConfigError("corrupt: severity " + std::to_string(spec.severity) + " outside 0..5");
    if (spec.severity == 0) return img;
    Rng rng(derive_seed(seed, corruption_name(spec.category), spec.severity));
    Raster out = img;
    const double s = static_cast<double>(spec.severity);
    switch (spec.category) {
        case CorruptionCategory::kNoise: {
            const double sigma = 0.02 * s;
            for (double& v : out.px) v += sigma * rng.normal();
            out.clamp01();
            break;
        }
        case CorruptionCategory::kBlur: {
            out = gaussian_blur(img, spec.severity);
            break;
        }
        case CorruptionCategory::kWeather: {
            // brightness/contrast drift plus a smooth additive haze field
            const double bright = 0.04 * s;
            const double contrast = 1.0 - 0.06 * s;
            const double haze_amp = 0.05 * s;
            const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
            const double px = rng.uniform(0.0, 6.2831853), py = rng.uniform(0.0, 6.2831853);
            const double tau = 6.2831853071795862;
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x) {
                    const double u = static_cast<double>(x) / out.width;
                    const double v = static_cast<double>(y) / out.height;
                    const double haze =
                        0.5 * (1.0 + std::cos(tau * fx * u + px) * std::cos(tau * fy * v + py));
                    double val = (out.at(y, x) - 0.5) * contrast + 0.5;
                    out.at(y, x) = val + bright + haze_amp * haze;
                }
            out.clamp01();
            break;
        }
        case CorruptionCategory::kDigital: {
            const int factor = 1 << std::min(spec.severity, 4);
            out = pixelate(img, factor);
            break;
        }
    }
    return out;
}

std::vector<std::size_t> few_shot_subset(std::size_t n, double fraction, std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw ContractError("few_shot_subset: fraction must be in (0,1]");
    const auto size = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (size == 0)
        throw ContractError("few_shot_subset: fraction " + std::to_string(fraction) + " of " +
                            std::to_string(n) + " scenes selects nothing; use a larger fraction");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "few_shot"));
    rng.shuffle(order);
    order.resize(size);
    return order;
}

}  // namespace probe::evalkit
