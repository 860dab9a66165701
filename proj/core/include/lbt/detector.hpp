#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lbt/box.hpp"
#include "lbt/data.hpp"
#include "lbt/image.hpp"
#include "lbt/tensor.hpp"

namespace lbt {

// Miniature two-stage detector: small convolutional backbone over a fixed
// square input, anchor-grid RPN, ROI head with bilinear crop-resize pooling
// and class-agnostic box regression.
struct ArchConfig {
    int image_size = 96;
    std::vector<int> backbone_channels = {8, 16, 32, 32};
    std::vector<int> backbone_strides = {2, 2, 2, 1};
    int rpn_channels = 32;
    std::vector<double> anchor_scales = {16.0, 24.0, 36.0};
    std::vector<double> anchor_ratios = {1.0, 0.5};  // height / width
    int roi_pool_size = 4;
    int fc_dim = 128;
    int num_classes = 3;
    int proposal_count = 64;
    double rpn_nms_threshold = 0.7;

    int feature_stride() const;
    int feature_size() const;
    int anchors_per_cell() const {
        return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
    }
    int num_anchors() const {
        return feature_size() * feature_size() * anchors_per_cell();
    }
    void validate() const;
};

std::string arch_to_json_string(const ArchConfig& arch);
ArchConfig arch_from_json_string(const std::string& text);

// Named parameter arrays. Teacher and student instances share names/shapes.
struct DetectorParams {
    ArchConfig arch;
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
};

// Fan-in-scaled random init; heads get small weights and the objectness bias
// starts negative so early proposals are not all-foreground.
DetectorParams init_params(const ArchConfig& arch, std::uint64_t seed);

// Anchor grid in image coordinates, index (row * fw + col) * A + a.
std::vector<Box> anchor_boxes(const ArchConfig& arch);

// Permutation p with anchor_boxes[p[i]] == hflip_box(anchor_boxes[i], W):
// the mirror-column permutation of the anchor grid.
std::vector<int> anchor_mirror_permutation(const ArchConfig& arch);

struct DetectorOutputs {
    std::vector<double> rpn_objectness;               // sigmoid score per anchor
    std::vector<DeltaVector> rpn_deltas;              // per anchor
    std::vector<Box> proposals;
    std::vector<double> proposal_scores;
    std::vector<std::vector<double>> roi_class_probs;  // C+1, last = background
    std::vector<DeltaVector> roi_deltas;               // per proposal
};

struct ForwardOptions {
    // When set, the ROI head runs on exactly these boxes in order. This is how
    // the flipped-image pass is forced onto the mirror images of the original
    // pass's proposals, making the consistency pairing index-wise.
    std::optional<std::vector<Box>> proposal_override;
    // Appended after RPN proposal selection (training-time ground-truth or
    // pseudo-box injection). Ignored when proposal_override is set.
    std::vector<Box> extra_proposals;
};

// Everything backward() needs: layer activations plus the outputs themselves.
struct ForwardCache {
    std::vector<Tensor> backbone;        // [0] input CHW, then post-relu layers
    Tensor rpn_hidden;                   // post-relu
    std::vector<double> obj_logits;      // per anchor
    std::vector<std::vector<double>> pooled;   // per proposal, C*P*P
    std::vector<std::vector<double>> fc1_out;  // per proposal, post-relu
    DetectorOutputs outputs;
};

DetectorOutputs forward(const DetectorParams& params, const Image& image,
                        const std::optional<std::vector<Box>>& proposal_override =
                            std::nullopt);

ForwardCache forward_cached(const DetectorParams& params, const Image& image,
                            const ForwardOptions& options = {});

// Gradients of a scalar loss w.r.t. the head outputs. Empty vectors mean zero
// gradient for that head; non-empty ones must match the output sizes.
struct OutputGrads {
    std::vector<double> d_obj_logits;
    std::vector<DeltaVector> d_rpn_deltas;
    std::vector<std::vector<double>> d_roi_probs;
    std::vector<DeltaVector> d_roi_deltas;
};

// Accumulates parameter gradients into `grads` (same names/shapes as params;
// missing entries are created). Proposal coordinates are treated as constants.
void backward(const DetectorParams& params, const ForwardCache& cache,
              const OutputGrads& grads_on_outputs,
              std::map<std::string, Tensor>& grads);

// Decode ROI regression against proposals, drop background, class-wise NMS,
// then score threshold, then truncate to max_detections by score.
std::vector<Detection> detect(const DetectorParams& params, const Image& image,
                              double score_threshold, double nms_threshold,
                              int max_detections);

// Training target assignment. `labels` is +1 positive / 0 negative / -1
// ignore; positives carry matched_gt and a regression target.
struct TargetAssignment {
    std::vector<int> labels;
    std::vector<int> matched_gt;
    std::vector<DeltaVector> regression_targets;
};

// Positive iff max IoU >= iou_pos or the anchor is the best one (with nonzero
// overlap) for some ground truth; negative iff max IoU < iou_neg.
TargetAssignment assign_anchor_targets(std::span<const Box> anchors,
                                       std::span<const Annotation> ground_truth,
                                       double iou_pos, double iou_neg);

// Positive (foreground, class via matched_gt) iff max IoU >= iou_fg, else
// background.
TargetAssignment assign_roi_targets(std::span<const Box> proposals,
                                    std::span<const Annotation> ground_truth,
                                    double iou_fg);

}  // namespace lbt
