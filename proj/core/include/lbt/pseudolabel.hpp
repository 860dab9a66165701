#pragma once

#include <span>
#include <string>
#include <vector>

#include "lbt/box.hpp"
#include "lbt/data.hpp"
#include "lbt/detector.hpp"

namespace lbt {

// Filtered teacher detections on a weakly augmented unlabeled image, used as
// training targets for the student. Every kept score is >= delta_used, and
// per-class pairwise IoU stays below the NMS threshold.
struct PseudoLabelSet {
    std::string image_id;
    std::vector<Detection> labels;  // descending score
    double delta_used = 0.0;
    int teacher_iteration = 0;
};

// Teacher forward, decode, drop background, class-wise NMS, then keep
// score >= delta. NMS runs before thresholding. May be empty.
PseudoLabelSet generate_pseudo_labels(const DetectorParams& teacher,
                                      const Image& image, double delta,
                                      double nms_threshold,
                                      const std::string& image_id = "",
                                      int teacher_iteration = 0);

// Diagnostic accuracy of a pseudo-label set against (synthetic) ground truth;
// never used in training. A pseudo-label is correct iff it greedily matches an
// unmatched same-class ground truth at IoU >= iou_threshold.
struct PseudoLabelStats {
    double precision = 1.0;  // 1.0 by convention for an empty set
    double recall = 1.0;     // 1.0 by convention when there is no ground truth
    int n_pseudo = 0;
    int n_ground_truth = 0;
    int n_correct = 0;
    std::vector<int> per_class_pseudo;
    std::vector<int> per_class_correct;
};

PseudoLabelStats pseudo_label_stats(const PseudoLabelSet& pls,
                                    std::span<const Annotation> ground_truth,
                                    double iou_threshold, int num_classes);

// One JSON line for the offline dump: {iteration, image_id, labels, delta}.
std::string pseudo_labels_to_json_line(const PseudoLabelSet& pls, int iteration);

}  // namespace lbt
