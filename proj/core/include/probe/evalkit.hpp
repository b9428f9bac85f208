#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "probe/box.hpp"
#include "probe/raster.hpp"

namespace probe::evalkit {

double iou(const Box& a, const Box& b);

struct GroundTruth {
    int image_id = 0;
    int class_id = 0;
    Box box;
};

struct PredDet {
    int image_id = 0;
    int class_id = 0;
    double score = 0.0;
    Box box;
};

// TP/FP flags per detection (sorted by descending score) at one IoU
// threshold, plus per-image unmatched ground-truth counts.
struct MatchResult {
    std::vector<char> is_tp;
    std::map<int, int> unmatched_gt_per_image;
    std::size_t total_gt = 0;
};

// Greedy matching by descending score; each detection takes the unmatched
// ground truth with the best IoU >= threshold (ties: lower gt index).
MatchResult match_detections(std::vector<PredDet> dets, const std::vector<GroundTruth>& gts,
                             double iou_thr);

// All-point (monotone precision envelope) average precision for a single
// class across the dataset.
double average_precision(const std::vector<PredDet>& dets, const std::vector<GroundTruth>& gts,
                         double iou_thr);

struct MapSuiteResult {
    double map50 = 0.0;
    double map5095 = 0.0;
    double ar = 0.0;  // mean recall over the threshold grid, <=100 dets/image
    std::map<int, double> ap50_per_class;
    std::map<int, double> ap5095_per_class;
    std::map<int, double> precision_per_class;  // at IoU 0.5, all supplied detections
    std::map<int, double> recall_per_class;
};

// Classes without ground truth are absent from per-class maps and excluded
// from the means.
MapSuiteResult map_suite(const std::vector<PredDet>& dets, const std::vector<GroundTruth>& gts,
                         int max_dets_per_image = 100);

enum class CorruptionCategory { kNoise, kBlur, kWeather, kDigital };

const char* corruption_name(CorruptionCategory c);
CorruptionCategory corruption_from_name(const std::string& name);
inline const CorruptionCategory kAllCorruptions[] = {
    CorruptionCategory::kNoise, CorruptionCategory::kBlur, CorruptionCategory::kWeather,
    CorruptionCategory::kDigital};

struct CorruptionSpec {
    CorruptionCategory category = CorruptionCategory::kNoise;
    int severity = 0;  // 0..5; 0 is the identity
};

// Severity scales: noise sigma 0.02*s, blur radius s px, weather
// brightness/haze proportional to s, pixelation factor 2^min(s,4).
Raster corrupt(const Raster& img, const CorruptionSpec& spec, std::uint64_t seed);

// Uniform sample without replacement of round(fraction*n) indices; drawn as
// a shuffled prefix so smaller fractions nest inside larger ones.
std::vector<std::size_t> few_shot_subset(std::size_t n, double fraction, std::uint64_t seed);

}  // namespace probe::evalkit
