#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lbt/box.hpp"
#include "lbt/data.hpp"
#include "lbt/detector.hpp"

namespace lbt {

struct EvalReport {
    std::vector<double> iou_thresholds;  // 0.50 .. 0.95 step 0.05
    // class id -> AP at each threshold; only classes with ground truth.
    std::map<int, std::vector<double>> per_class_ap;
    double ap50 = 0.0;
    double ap50_95 = 0.0;  // "mAP": mean over classes and thresholds
    int n_images = 0;
    int n_ground_truth = 0;
    int n_detections = 0;
};

// Greedy matching of one image's detections against ground truth: highest
// score first, each detection takes the highest-IoU unmatched same-class
// ground truth at or above the threshold. Returns TP (1) / FP (0) flags in
// score-descending order.
std::vector<std::uint8_t> match_detections(
    const std::vector<Detection>& dets,
    const std::vector<Annotation>& ground_truth, double iou_threshold);

// 101-point interpolated AP from TP/FP flags ordered by descending score.
// Conventions for n_gt == 0: 0 when any detection exists, else 1 (the caller
// skips such classes from averages).
double average_precision(const std::vector<std::uint8_t>& flags, int n_gt);

struct DetectSettings {
    double score_threshold = 0.05;
    double nms_threshold = 0.5;
    int max_detections = 100;
};

// Scores a detection dump against ground truth (both keyed by image id).
EvalReport evaluate_detections(
    const std::map<std::string, std::vector<Detection>>& detections,
    const std::map<std::string, std::vector<Annotation>>& ground_truth,
    int num_classes);

// Runs the detector over the given split and scores it.
EvalReport evaluate(const DetectorParams& params, const Dataset& dataset,
                    std::span<const std::string> image_ids,
                    const DetectSettings& settings = {});

std::string eval_report_to_json_string(const EvalReport& report);

}  // namespace lbt
