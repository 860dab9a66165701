#include "lbt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "lbt/checkpoint.hpp"
#include "lbt/nn.hpp"
#include "lbt/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace lbt {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (burn_in_iterations < 0 || total_iterations < burn_in_iterations)
        throw std::invalid_argument("config: need 0 <= burn_in <= total iterations");
    if (batch_labeled < 1 || batch_unlabeled < 1)
        throw std::invalid_argument("config: batch sizes must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("config: learning_rate <= 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw std::invalid_argument("config: momentum must be in [0,1)");
    if (!(ema_alpha >= 0.0 && ema_alpha < 1.0))
        throw std::invalid_argument("config: ema_alpha must be in [0,1)");
    if (!(delta > 0.0 && delta < 1.0))
        throw std::invalid_argument("config: delta must be in (0,1)");
    if (!(label_fraction > 0.0 && label_fraction < 1.0))
        throw std::invalid_argument("config: label_fraction must be in (0,1)");
    if (!(iou_neg <= iou_pos))
        throw std::invalid_argument("config: iou_neg > iou_pos");
    if (weights.lambda_unsup < 0 || weights.lambda_con < 0 || weights.focal_gamma < 0)
        throw std::invalid_argument("config: loss weights must be >= 0");
    if (!(weights.tau_bg > 0.0 && weights.tau_bg < 1.0))
        throw std::invalid_argument("config: tau_bg must be in (0,1)");
    arch.validate();
}

std::string train_config_to_json_string(const TrainConfig& c) {
    json j = {
        {"burn_in_iterations", c.burn_in_iterations},
        {"total_iterations", c.total_iterations},
        {"batch_labeled", c.batch_labeled},
        {"batch_unlabeled", c.batch_unlabeled},
        {"learning_rate", c.learning_rate},
        {"momentum", c.momentum},
        {"ema_alpha", c.ema_alpha},
        {"delta", c.delta},
        {"pseudo_nms_threshold", c.pseudo_nms_threshold},
        {"weights",
         {{"lambda_unsup", c.weights.lambda_unsup},
          {"lambda_con", c.weights.lambda_con},
          {"focal_gamma", c.weights.focal_gamma},
          {"tau_bg", c.weights.tau_bg}}},
        {"iou_pos", c.iou_pos},
        {"iou_neg", c.iou_neg},
        {"iou_fg", c.iou_fg},
        {"smooth_l1_beta", c.smooth_l1_beta},
        {"label_fraction", c.label_fraction},
        {"augment",
         {{"flip_probability", c.augment.flip_probability},
          {"brightness_min", c.augment.brightness_min},
          {"brightness_max", c.augment.brightness_max},
          {"contrast_min", c.augment.contrast_min},
          {"contrast_max", c.augment.contrast_max},
          {"saturation_min", c.augment.saturation_min},
          {"saturation_max", c.augment.saturation_max},
          {"grayscale_probability", c.augment.grayscale_probability},
          {"blur_sigma_min", c.augment.blur_sigma_min},
          {"blur_sigma_max", c.augment.blur_sigma_max},
          {"cutout_count", c.augment.cutout_count},
          {"cutout_min_size", c.augment.cutout_min_size},
          {"cutout_max_size", c.augment.cutout_max_size},
          {"cutout_fill", c.augment.cutout_fill}}},
        {"eval_interval", c.eval_interval},
        {"checkpoint_interval", c.checkpoint_interval},
        {"seed", c.seed},
        {"disable_con_loc", c.disable_con_loc},
        {"disable_focal", c.disable_focal},
        {"disable_mutual", c.disable_mutual},
        {"unsup_regression", c.unsup_regression},
        {"conloc_rpn", c.conloc_rpn},
        {"conloc_roi", c.conloc_roi},
        {"conloc_labeled", c.conloc_labeled},
        {"conloc_unlabeled", c.conloc_unlabeled},
        {"dump_pseudo", c.dump_pseudo},
        {"arch", json::parse(arch_to_json_string(c.arch))}};
    return j.dump(2) + "\n";
}

TrainConfig train_config_from_json_string(const std::string& text) {
    const json j = json::parse(text);
    TrainConfig c;
    c.burn_in_iterations = j.value("burn_in_iterations", c.burn_in_iterations);
    c.total_iterations = j.value("total_iterations", c.total_iterations);
    c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
    c.batch_unlabeled = j.value("batch_unlabeled", c.batch_unlabeled);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
    c.delta = j.value("delta", c.delta);
    c.pseudo_nms_threshold = j.value("pseudo_nms_threshold", c.pseudo_nms_threshold);
    if (j.contains("weights")) {
        const json& w = j.at("weights");
        c.weights.lambda_unsup = w.value("lambda_unsup", c.weights.lambda_unsup);
        c.weights.lambda_con = w.value("lambda_con", c.weights.lambda_con);
        c.weights.focal_gamma = w.value("focal_gamma", c.weights.focal_gamma);
        c.weights.tau_bg = w.value("tau_bg", c.weights.tau_bg);
    }
    c.iou_pos = j.value("iou_pos", c.iou_pos);
    c.iou_neg = j.value("iou_neg", c.iou_neg);
    c.iou_fg = j.value("iou_fg", c.iou_fg);
    c.smooth_l1_beta = j.value("smooth_l1_beta", c.smooth_l1_beta);
    c.label_fraction = j.value("label_fraction", c.label_fraction);
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        auto& g = c.augment;
        g.flip_probability = a.value("flip_probability", g.flip_probability);
        g.brightness_min = a.value("brightness_min", g.brightness_min);
        g.brightness_max = a.value("brightness_max", g.brightness_max);
        g.contrast_min = a.value("contrast_min", g.contrast_min);
        g.contrast_max = a.value("contrast_max", g.contrast_max);
        g.saturation_min = a.value("saturation_min", g.saturation_min);
        g.saturation_max = a.value("saturation_max", g.saturation_max);
        g.grayscale_probability = a.value("grayscale_probability", g.grayscale_probability);
        g.blur_sigma_min = a.value("blur_sigma_min", g.blur_sigma_min);
        g.blur_sigma_max = a.value("blur_sigma_max", g.blur_sigma_max);
        g.cutout_count = a.value("cutout_count", g.cutout_count);
        g.cutout_min_size = a.value("cutout_min_size", g.cutout_min_size);
        g.cutout_max_size = a.value("cutout_max_size", g.cutout_max_size);
        g.cutout_fill = a.value("cutout_fill", g.cutout_fill);
    }
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.seed = j.value("seed", c.seed);
    c.disable_con_loc = j.value("disable_con_loc", c.disable_con_loc);
    c.disable_focal = j.value("disable_focal", c.disable_focal);
    c.disable_mutual = j.value("disable_mutual", c.disable_mutual);
    c.unsup_regression = j.value("unsup_regression", c.unsup_regression);
    c.conloc_rpn = j.value("conloc_rpn", c.conloc_rpn);
    c.conloc_roi = j.value("conloc_roi", c.conloc_roi);
    c.conloc_labeled = j.value("conloc_labeled", c.conloc_labeled);
    c.conloc_unlabeled = j.value("conloc_unlabeled", c.conloc_unlabeled);
    c.dump_pseudo = j.value("dump_pseudo", c.dump_pseudo);
    if (j.contains("arch")) c.arch = arch_from_json_string(j.at("arch").dump());
    return c;
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

void ema_update(DetectorParams& teacher, const DetectorParams& student,
                double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0))
        throw std::invalid_argument("ema_update: alpha must be in [0,1)");
    if (teacher.tensors.size() != student.tensors.size())
        throw std::invalid_argument("ema_update: parameter structure mismatch");
    auto ti = teacher.tensors.begin();
    auto si = student.tensors.begin();
    for (; ti != teacher.tensors.end(); ++ti, ++si) {
        if (ti->first != si->first || !ti->second.same_shape(si->second))
            throw std::invalid_argument("ema_update: parameter structure mismatch");
        double* t = ti->second.data();
        const double* s = si->second.data();
        const std::size_t n = ti->second.numel();
        for (std::size_t i = 0; i < n; ++i)
            t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
    }
}

// ---------------------------------------------------------------------------
// Per-image tasks
// ---------------------------------------------------------------------------

namespace {

void accumulate_scaled(std::map<std::string, Tensor>& acc,
                       const std::map<std::string, Tensor>& grads, double scale) {
    for (const auto& [name, g] : grads) {
        auto it = acc.find(name);
        if (it == acc.end()) it = acc.emplace(name, Tensor{g.shape}).first;
        double* a = it->second.data();
        const double* b = g.data();
        for (std::size_t i = 0; i < g.numel(); ++i) a[i] += scale * b[i];
    }
}

// Balanced two-group mean: 0.5 each when both groups are non-empty, otherwise
// the non-empty group alone. Returns per-group weights (0 for empty groups).
void balanced_weights(std::size_t n_a, std::size_t n_b, double& w_a, double& w_b) {
    if (n_a > 0 && n_b > 0) {
        w_a = 0.5 / static_cast<double>(n_a);
        w_b = 0.5 / static_cast<double>(n_b);
    } else if (n_a > 0) {
        w_a = 1.0 / static_cast<double>(n_a);
        w_b = 0.0;
    } else if (n_b > 0) {
        w_a = 0.0;
        w_b = 1.0 / static_cast<double>(n_b);
    } else {
        w_a = w_b = 0.0;
    }
}

}  // namespace

struct Trainer::ImageTask {
    // Inputs.
    std::string image_id;
    int iteration = 0;
    int slot = 0;
    bool unlabeled = false;

    // Outputs.
    LossBreakdown losses;      // unweighted per-image components
    double conloc_unsup = 0.0; // unlabeled-side consistency
    std::map<std::string, Tensor> grads;
    PseudoLabelStats pstats;
    PseudoLabelSet pls;
};

// Supervised path shared by burn-in and the mutual stage's labeled half:
// weak flip augmentation, the four detector losses, and (unless disabled) the
// flip-consistency localization loss computed from an extra pass over the
// flipped image with mirrored proposals.
void Trainer::supervised_image(ImageTask& task) const {
    const TrainConfig& cfg = config_;
    const AnnotatedImage raw = dataset_.load_image(task.image_id);
    const AnnotatedImage img = weak_augment(
        raw, derive_seed(cfg.seed, "labeled-flip", task.iteration, task.slot),
        std::nullopt, cfg.augment.flip_probability);

    ForwardOptions options;
    for (const auto& a : img.annotations) options.extra_proposals.push_back(a.box);
    const ForwardCache cache = forward_cached(state_.student, img.pixels, options);
    const DetectorOutputs& out = cache.outputs;
    const std::size_t n_anchors = anchors_.size();
    const std::size_t n_rois = out.proposals.size();

    OutputGrads og;

    // RPN classification: balanced binary cross-entropy over pos/neg anchors.
    const TargetAssignment at = assign_anchor_targets(
        anchors_, img.annotations, cfg.iou_pos, cfg.iou_neg);
    std::size_t n_pos = 0, n_neg = 0;
    for (int label : at.labels) {
        if (label == 1) ++n_pos;
        else if (label == 0) ++n_neg;
    }
    double w_pos, w_neg;
    balanced_weights(n_pos, n_neg, w_pos, w_neg);
    og.d_obj_logits.assign(n_anchors, 0.0);
    double rpn_cls = 0.0;
    for (std::size_t i = 0; i < n_anchors; ++i) {
        if (at.labels[i] < 0) continue;
        const double y = at.labels[i] == 1 ? 1.0 : 0.0;
        const double w = at.labels[i] == 1 ? w_pos : w_neg;
        rpn_cls += w * nn::bce_with_logit(cache.obj_logits[i], y);
        og.d_obj_logits[i] = w * (out.rpn_objectness[i] - y);
    }
    task.losses.rpn_cls = rpn_cls;

    // RPN regression over positive anchors.
    if (n_pos > 0) {
        og.d_rpn_deltas.assign(n_anchors, DeltaVector{});
        const double w = 1.0 / static_cast<double>(n_pos);
        double rpn_reg = 0.0;
        for (std::size_t i = 0; i < n_anchors; ++i) {
            if (at.labels[i] != 1) continue;
            rpn_reg += w * smooth_l1(out.rpn_deltas[i], at.regression_targets[i],
                                     cfg.smooth_l1_beta);
            DeltaVector g = smooth_l1_grad(out.rpn_deltas[i],
                                           at.regression_targets[i],
                                           cfg.smooth_l1_beta);
            og.d_rpn_deltas[i] =
                DeltaVector{w * g.dcx, w * g.dcy, w * g.dw, w * g.dh};
        }
        task.losses.rpn_reg = rpn_reg;
    }

    // ROI classification (balanced cross-entropy) and foreground regression.
    const TargetAssignment rt =
        assign_roi_targets(out.proposals, img.annotations, cfg.iou_fg);
    std::size_t n_fg = 0, n_bg = 0;
    for (int label : rt.labels) (label == 1 ? n_fg : n_bg) += 1;
    double w_fg, w_bg;
    balanced_weights(n_fg, n_bg, w_fg, w_bg);
    og.d_roi_probs.assign(n_rois, {});
    if (n_fg > 0) og.d_roi_deltas.assign(n_rois, DeltaVector{});
    const int bg_class = cfg.arch.num_classes;
    double roi_cls = 0.0, roi_reg = 0.0;
    for (std::size_t r = 0; r < n_rois; ++r) {
        const bool fg = rt.labels[r] == 1;
        const int target =
            fg ? img.annotations[static_cast<std::size_t>(rt.matched_gt[r])].class_id
               : bg_class;
        const double w = fg ? w_fg : w_bg;
        if (w == 0.0) continue;
        roi_cls += w * cross_entropy(out.roi_class_probs[r], target);
        og.d_roi_probs[r] = cross_entropy_grad(out.roi_class_probs[r], target);
        for (double& v : og.d_roi_probs[r]) v *= w;
        if (fg) {
            roi_reg += smooth_l1(out.roi_deltas[r], rt.regression_targets[r],
                                 cfg.smooth_l1_beta) /
                       static_cast<double>(n_fg);
            DeltaVector g = smooth_l1_grad(out.roi_deltas[r],
                                           rt.regression_targets[r],
                                           cfg.smooth_l1_beta);
            const double wr = 1.0 / static_cast<double>(n_fg);
            og.d_roi_deltas[r] =
                DeltaVector{wr * g.dcx, wr * g.dcy, wr * g.dw, wr * g.dh};
        }
    }
    task.losses.roi_cls = roi_cls;
    task.losses.roi_reg = roi_reg;

    // Flip-consistency localization loss.
    const bool conloc_on = cfg.conloc_labeled && !cfg.disable_con_loc &&
                           (cfg.conloc_rpn || cfg.conloc_roi);
    if (!conloc_on) {
        backward(state_.student, cache, og, task.grads);
        return;
    }

    const Image flipped = hflip_image(img.pixels);
    ForwardOptions flip_options;
    std::vector<Box> mirrored;
    mirrored.reserve(n_rois);
    for (const Box& b : out.proposals)
        mirrored.push_back(hflip_box(b, cfg.arch.image_size));
    flip_options.proposal_override = std::move(mirrored);
    const ForwardCache flip_cache =
        forward_cached(state_.student, flipped, flip_options);

    OutputGrads og_flip;
    double con_loc = 0.0;
    const double lc = cfg.weights.lambda_con;

    if (cfg.conloc_rpn) {
        // Pair anchor i with the mirror-column anchor of the flipped pass and
        // mask out anchors the original pass deems background.
        std::vector<DeltaVector> flip_paired(n_anchors);
        for (std::size_t i = 0; i < n_anchors; ++i)
            flip_paired[i] =
                flip_cache.outputs
                    .rpn_deltas[static_cast<std::size_t>(mirror_perm_[i])];
        std::vector<std::vector<double>> obj_probs(n_anchors);
        for (std::size_t i = 0; i < n_anchors; ++i)
            obj_probs[i] = {out.rpn_objectness[i], 1.0 - out.rpn_objectness[i]};
        const std::vector<std::uint8_t> mask =
            background_mask(obj_probs, cfg.weights.tau_bg);
        con_loc += consistency_loc_loss(out.rpn_deltas, flip_paired, mask);
        const ConsistencyLocGrad cg =
            consistency_loc_loss_grad(out.rpn_deltas, flip_paired, mask);
        if (og.d_rpn_deltas.empty()) og.d_rpn_deltas.assign(n_anchors, DeltaVector{});
        og_flip.d_rpn_deltas.assign(n_anchors, DeltaVector{});
        for (std::size_t i = 0; i < n_anchors; ++i) {
            og.d_rpn_deltas[i].dcx += lc * cg.d_orig[i].dcx;
            og.d_rpn_deltas[i].dcy += lc * cg.d_orig[i].dcy;
            og.d_rpn_deltas[i].dw += lc * cg.d_orig[i].dw;
            og.d_rpn_deltas[i].dh += lc * cg.d_orig[i].dh;
            auto& gf = og_flip.d_rpn_deltas[static_cast<std::size_t>(mirror_perm_[i])];
            gf.dcx += lc * cg.d_flip[i].dcx;
            gf.dcy += lc * cg.d_flip[i].dcy;
            gf.dw += lc * cg.d_flip[i].dw;
            gf.dh += lc * cg.d_flip[i].dh;
        }
    }
    if (cfg.conloc_roi && n_rois > 0) {
        const std::vector<std::uint8_t> mask =
            background_mask(out.roi_class_probs, cfg.weights.tau_bg);
        con_loc += consistency_loc_loss(out.roi_deltas,
                                        flip_cache.outputs.roi_deltas, mask);
        const ConsistencyLocGrad cg = consistency_loc_loss_grad(
            out.roi_deltas, flip_cache.outputs.roi_deltas, mask);
        if (og.d_roi_deltas.empty()) og.d_roi_deltas.assign(n_rois, DeltaVector{});
        og_flip.d_roi_deltas.assign(n_rois, DeltaVector{});
        for (std::size_t r = 0; r < n_rois; ++r) {
            og.d_roi_deltas[r].dcx += lc * cg.d_orig[r].dcx;
            og.d_roi_deltas[r].dcy += lc * cg.d_orig[r].dcy;
            og.d_roi_deltas[r].dw += lc * cg.d_orig[r].dw;
            og.d_roi_deltas[r].dh += lc * cg.d_orig[r].dh;
            og_flip.d_roi_deltas[r] =
                DeltaVector{lc * cg.d_flip[r].dcx, lc * cg.d_flip[r].dcy,
                            lc * cg.d_flip[r].dw, lc * cg.d_flip[r].dh};
        }
    }
    task.losses.con_loc = con_loc;

    backward(state_.student, cache, og, task.grads);
    backward(state_.student, flip_cache, og_flip, task.grads);
}

// Unlabeled path of a mutual step: teacher pseudo-labels on the weak view,
// student classification losses on the strong view, and consistency on the
// strong view versus its flip (ground truth never participates; it is read
// purely for the diagnostic pseudo-label stats).
void Trainer::unsupervised_image(ImageTask& task) const {
    const TrainConfig& cfg = config_;
    const AnnotatedImage raw = dataset_.load_image(task.image_id);

    // Teacher and student share the same weak flip decision so pseudo boxes
    // align with the student's view.
    Rng flip_rng(derive_seed(cfg.seed, "unlabeled-flip", task.iteration, task.slot));
    const bool flip = flip_rng.bernoulli(cfg.augment.flip_probability);
    const AnnotatedImage weak = weak_augment(raw, 0, flip);

    task.pls = generate_pseudo_labels(*state_.teacher, weak.pixels, cfg.delta,
                                      cfg.pseudo_nms_threshold, task.image_id,
                                      state_.iteration);
    task.pstats = pseudo_label_stats(task.pls, weak.annotations, 0.5,
                                     cfg.arch.num_classes);

    const Image strong = strong_augment(
        weak.pixels, derive_seed(cfg.seed, "strong-aug", task.iteration, task.slot),
        cfg.augment);

    std::vector<Annotation> pseudo_gt;
    for (const Detection& d : task.pls.labels)
        pseudo_gt.push_back(Annotation{d.box, d.class_id});

    ForwardOptions options;
    for (const auto& a : pseudo_gt) options.extra_proposals.push_back(a.box);
    const ForwardCache cache = forward_cached(state_.student, strong, options);
    const DetectorOutputs& out = cache.outputs;
    const std::size_t n_anchors = anchors_.size();
    const std::size_t n_rois = out.proposals.size();

    OutputGrads og;
    const double lu = cfg.weights.lambda_unsup;
    const double gamma = cfg.disable_focal ? 0.0 : cfg.weights.focal_gamma;

    if (!pseudo_gt.empty()) {
        // Unsupervised RPN objectness against pseudo targets.
        const TargetAssignment at =
            assign_anchor_targets(anchors_, pseudo_gt, cfg.iou_pos, cfg.iou_neg);
        std::size_t n_pos = 0, n_neg = 0;
        for (int label : at.labels) {
            if (label == 1) ++n_pos;
            else if (label == 0) ++n_neg;
        }
        double w_pos, w_neg;
        balanced_weights(n_pos, n_neg, w_pos, w_neg);
        og.d_obj_logits.assign(n_anchors, 0.0);
        double rpn_cls = 0.0;
        for (std::size_t i = 0; i < n_anchors; ++i) {
            if (at.labels[i] < 0) continue;
            const double y = at.labels[i] == 1 ? 1.0 : 0.0;
            const double w = at.labels[i] == 1 ? w_pos : w_neg;
            rpn_cls += w * nn::bce_with_logit(cache.obj_logits[i], y);
            og.d_obj_logits[i] = lu * w * (out.rpn_objectness[i] - y);
        }
        task.losses.unsup_rpn_cls = rpn_cls;

        // Unsupervised ROI classification with focal loss, balanced over the
        // pseudo-foreground/background groups.
        const TargetAssignment rt =
            assign_roi_targets(out.proposals, pseudo_gt, cfg.iou_fg);
        std::size_t n_fg = 0, n_bg = 0;
        for (int label : rt.labels) (label == 1 ? n_fg : n_bg) += 1;
        double w_fg, w_bg;
        balanced_weights(n_fg, n_bg, w_fg, w_bg);
        og.d_roi_probs.assign(n_rois, {});
        const int bg_class = cfg.arch.num_classes;
        double roi_cls = 0.0;
        for (std::size_t r = 0; r < n_rois; ++r) {
            const bool fg = rt.labels[r] == 1;
            const int target =
                fg ? pseudo_gt[static_cast<std::size_t>(rt.matched_gt[r])].class_id
                   : bg_class;
            const double w = fg ? w_fg : w_bg;
            if (w == 0.0) continue;
            roi_cls += w * focal_loss(out.roi_class_probs[r], target, gamma);
            og.d_roi_probs[r] = focal_loss_grad(out.roi_class_probs[r], target, gamma);
            for (double& v : og.d_roi_probs[r]) v *= lu * w;
        }
        task.losses.unsup_roi_cls = roi_cls;

        if (cfg.unsup_regression) {
            // Optional pseudo-box regression, folded into the two unsup terms.
            if (n_pos > 0) {
                og.d_rpn_deltas.assign(n_anchors, DeltaVector{});
                const double w = 1.0 / static_cast<double>(n_pos);
                for (std::size_t i = 0; i < n_anchors; ++i) {
                    if (at.labels[i] != 1) continue;
                    task.losses.unsup_rpn_cls +=
                        w * smooth_l1(out.rpn_deltas[i], at.regression_targets[i],
                                      cfg.smooth_l1_beta);
                    DeltaVector g = smooth_l1_grad(
                        out.rpn_deltas[i], at.regression_targets[i],
                        cfg.smooth_l1_beta);
                    og.d_rpn_deltas[i] = DeltaVector{lu * w * g.dcx, lu * w * g.dcy,
                                                     lu * w * g.dw, lu * w * g.dh};
                }
            }
            if (n_fg > 0) {
                og.d_roi_deltas.assign(n_rois, DeltaVector{});
                const double w = 1.0 / static_cast<double>(n_fg);
                for (std::size_t r = 0; r < n_rois; ++r) {
                    if (rt.labels[r] != 1) continue;
                    task.losses.unsup_roi_cls +=
                        w * smooth_l1(out.roi_deltas[r], rt.regression_targets[r],
                                      cfg.smooth_l1_beta);
                    DeltaVector g = smooth_l1_grad(
                        out.roi_deltas[r], rt.regression_targets[r],
                        cfg.smooth_l1_beta);
                    og.d_roi_deltas[r] = DeltaVector{lu * w * g.dcx, lu * w * g.dcy,
                                                     lu * w * g.dw, lu * w * g.dh};
                }
            }
        }
    }

    const bool conloc_on = cfg.conloc_unlabeled && !cfg.disable_con_loc &&
                           (cfg.conloc_rpn || cfg.conloc_roi);
    if (!conloc_on) {
        backward(state_.student, cache, og, task.grads);
        return;
    }

    const Image flipped = hflip_image(strong);
    ForwardOptions flip_options;
    std::vector<Box> mirrored;
    mirrored.reserve(n_rois);
    for (const Box& b : out.proposals)
        mirrored.push_back(hflip_box(b, cfg.arch.image_size));
    flip_options.proposal_override = std::move(mirrored);
    const ForwardCache flip_cache =
        forward_cached(state_.student, flipped, flip_options);

    OutputGrads og_flip;
    double con_loc = 0.0;
    const double lc = cfg.weights.lambda_con;

    if (cfg.conloc_rpn) {
        std::vector<DeltaVector> flip_paired(n_anchors);
        for (std::size_t i = 0; i < n_anchors; ++i)
            flip_paired[i] =
                flip_cache.outputs
                    .rpn_deltas[static_cast<std::size_t>(mirror_perm_[i])];
        std::vector<std::vector<double>> obj_probs(n_anchors);
        for (std::size_t i = 0; i < n_anchors; ++i)
            obj_probs[i] = {out.rpn_objectness[i], 1.0 - out.rpn_objectness[i]};
        const std::vector<std::uint8_t> mask =
            background_mask(obj_probs, cfg.weights.tau_bg);
        con_loc += consistency_loc_loss(out.rpn_deltas, flip_paired, mask);
        const ConsistencyLocGrad cg =
            consistency_loc_loss_grad(out.rpn_deltas, flip_paired, mask);
        if (og.d_rpn_deltas.empty()) og.d_rpn_deltas.assign(n_anchors, DeltaVector{});
        og_flip.d_rpn_deltas.assign(n_anchors, DeltaVector{});
        for (std::size_t i = 0; i < n_anchors; ++i) {
            og.d_rpn_deltas[i].dcx += lc * cg.d_orig[i].dcx;
            og.d_rpn_deltas[i].dcy += lc * cg.d_orig[i].dcy;
            og.d_rpn_deltas[i].dw += lc * cg.d_orig[i].dw;
            og.d_rpn_deltas[i].dh += lc * cg.d_orig[i].dh;
            auto& gf = og_flip.d_rpn_deltas[static_cast<std::size_t>(mirror_perm_[i])];
            gf.dcx += lc * cg.d_flip[i].dcx;
            gf.dcy += lc * cg.d_flip[i].dcy;
            gf.dw += lc * cg.d_flip[i].dw;
            gf.dh += lc * cg.d_flip[i].dh;
        }
    }
    if (cfg.conloc_roi && n_rois > 0) {
        const std::vector<std::uint8_t> mask =
            background_mask(out.roi_class_probs, cfg.weights.tau_bg);
        con_loc += consistency_loc_loss(out.roi_deltas,
                                        flip_cache.outputs.roi_deltas, mask);
        const ConsistencyLocGrad cg = consistency_loc_loss_grad(
            out.roi_deltas, flip_cache.outputs.roi_deltas, mask);
        if (og.d_roi_deltas.empty()) og.d_roi_deltas.assign(n_rois, DeltaVector{});
        og_flip.d_roi_deltas.assign(n_rois, DeltaVector{});
        for (std::size_t r = 0; r < n_rois; ++r) {
            og.d_roi_deltas[r].dcx += lc * cg.d_orig[r].dcx;
            og.d_roi_deltas[r].dcy += lc * cg.d_orig[r].dcy;
            og.d_roi_deltas[r].dw += lc * cg.d_orig[r].dw;
            og.d_roi_deltas[r].dh += lc * cg.d_orig[r].dh;
            og_flip.d_roi_deltas[r] =
                DeltaVector{lc * cg.d_flip[r].dcx, lc * cg.d_flip[r].dcy,
                            lc * cg.d_flip[r].dw, lc * cg.d_flip[r].dh};
        }
    }
    task.conloc_unsup = con_loc;

    backward(state_.student, cache, og, task.grads);
    backward(state_.student, flip_cache, og_flip, task.grads);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, const Dataset& dataset, std::string run_dir)
    : config_(std::move(config)), dataset_(dataset), run_dir_(std::move(run_dir)) {
    config_.arch.num_classes = dataset_.num_classes();
    config_.validate();

    split_ = split_labeled(dataset_.manifest(), config_.label_fraction,
                           derive_seed(config_.seed, "split"));
    anchors_ = anchor_boxes(config_.arch);
    mirror_perm_ = anchor_mirror_permutation(config_.arch);
    state_.student = init_params(config_.arch, derive_seed(config_.seed, "init"));

    if (!run_dir_.empty()) {
        fs::create_directories(fs::path(run_dir_) / "checkpoints");
        if (config_.dump_pseudo)
            fs::create_directories(fs::path(run_dir_) / "pseudo_dumps");
        std::ofstream cfg_out(fs::path(run_dir_) / "config.json", std::ios::binary);
        cfg_out << train_config_to_json_string(config_);
        json split_json = {{"fraction", split_.fraction},
                           {"seed", split_.seed},
                           {"labeled_ids", split_.labeled_ids},
                           {"unlabeled_ids", split_.unlabeled_ids}};
        std::ofstream split_out(fs::path(run_dir_) / "split.json", std::ios::binary);
        split_out << split_json.dump(2) << "\n";
    }
}

std::vector<std::string> Trainer::sample_labeled_batch(int iteration) const {
    Rng rng(derive_seed(config_.seed, "labeled-batch", static_cast<std::uint64_t>(iteration)));
    std::vector<std::string> batch;
    for (int b = 0; b < config_.batch_labeled; ++b)
        batch.push_back(split_.labeled_ids[static_cast<std::size_t>(
            rng.uniform_int(split_.labeled_ids.size()))]);
    return batch;
}

std::vector<std::string> Trainer::sample_unlabeled_batch(int iteration) const {
    Rng rng(derive_seed(config_.seed, "unlabeled-batch", static_cast<std::uint64_t>(iteration)));
    std::vector<std::string> batch;
    const auto& pool =
        split_.unlabeled_ids.empty() ? split_.labeled_ids : split_.unlabeled_ids;
    for (int b = 0; b < config_.batch_unlabeled; ++b)
        batch.push_back(pool[static_cast<std::size_t>(rng.uniform_int(pool.size()))]);
    return batch;
}

void Trainer::apply_sgd_step(const std::map<std::string, Tensor>& grads) {
    for (auto& [name, param] : state_.student.tensors) {
        auto vit = state_.momentum.find(name);
        if (vit == state_.momentum.end())
            vit = state_.momentum.emplace(name, Tensor{param.shape}).first;
        Tensor& vel = vit->second;
        const auto git = grads.find(name);
        const double* g = git != grads.end() ? git->second.data() : nullptr;
        double* v = vel.data();
        double* p = param.data();
        for (std::size_t i = 0; i < param.numel(); ++i) {
            v[i] = config_.momentum * v[i] + (g ? g[i] : 0.0);
            p[i] -= config_.learning_rate * v[i];
        }
    }
}

LossBreakdown Trainer::step_impl(const std::vector<std::string>& labeled_batch,
                                 const std::vector<std::string>* unlabeled_batch) {
    const int iteration = state_.iteration + 1;
    const std::size_t n_labeled = labeled_batch.size();
    const std::size_t n_unlabeled = unlabeled_batch ? unlabeled_batch->size() : 0;

    std::vector<ImageTask> tasks(n_labeled + n_unlabeled);
    for (std::size_t i = 0; i < n_labeled; ++i) {
        tasks[i].image_id = labeled_batch[i];
        tasks[i].iteration = iteration;
        tasks[i].slot = static_cast<int>(i);
    }
    for (std::size_t i = 0; i < n_unlabeled; ++i) {
        ImageTask& t = tasks[n_labeled + i];
        t.image_id = (*unlabeled_batch)[i];
        t.iteration = iteration;
        t.slot = static_cast<int>(i);
        t.unlabeled = true;
    }

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].unlabeled) unsupervised_image(tasks[i]);
        else supervised_image(tasks[i]);
    }

    // Deterministic merge in slot order.
    LossBreakdown lb;
    std::map<std::string, Tensor> grads;
    const double inv_l = 1.0 / static_cast<double>(n_labeled);
    for (std::size_t i = 0; i < n_labeled; ++i) {
        lb.rpn_cls += inv_l * tasks[i].losses.rpn_cls;
        lb.rpn_reg += inv_l * tasks[i].losses.rpn_reg;
        lb.roi_cls += inv_l * tasks[i].losses.roi_cls;
        lb.roi_reg += inv_l * tasks[i].losses.roi_reg;
        lb.con_loc += inv_l * tasks[i].losses.con_loc;
        accumulate_scaled(grads, tasks[i].grads, inv_l);
    }
    PseudoBatchStats pstats;
    if (n_unlabeled > 0) {
        const double inv_u = 1.0 / static_cast<double>(n_unlabeled);
        int sum_pseudo = 0, sum_correct = 0, sum_gt = 0;
        for (std::size_t i = 0; i < n_unlabeled; ++i) {
            const ImageTask& t = tasks[n_labeled + i];
            lb.unsup_rpn_cls += inv_u * t.losses.unsup_rpn_cls;
            lb.unsup_roi_cls += inv_u * t.losses.unsup_roi_cls;
            lb.con_loc += inv_u * t.conloc_unsup;
            accumulate_scaled(grads, t.grads, inv_u);
            sum_pseudo += t.pstats.n_pseudo;
            sum_correct += t.pstats.n_correct;
            sum_gt += t.pstats.n_ground_truth;
        }
        pstats.count = sum_pseudo;
        pstats.precision =
            sum_pseudo == 0 ? 1.0 : static_cast<double>(sum_correct) / sum_pseudo;
        pstats.recall =
            sum_gt == 0 ? 1.0 : static_cast<double>(sum_correct) / sum_gt;
        last_pseudo_ = pstats;
        last_pls_.clear();
        for (std::size_t i = 0; i < n_unlabeled; ++i)
            last_pls_.push_back(tasks[n_labeled + i].pls);
    }

    lb = n_unlabeled > 0 ? mutual_total(lb, lb.unsup_rpn_cls, lb.unsup_roi_cls,
                                        lb.con_loc, config_.weights)
                         : burn_in_total(lb, config_.weights);

    if (!std::isfinite(lb.total)) {
        if (!run_dir_.empty()) {
            json dump = {{"iteration", iteration},
                         {"rpn_cls", lb.rpn_cls},
                         {"rpn_reg", lb.rpn_reg},
                         {"roi_cls", lb.roi_cls},
                         {"roi_reg", lb.roi_reg},
                         {"con_loc", lb.con_loc},
                         {"unsup_rpn_cls", lb.unsup_rpn_cls},
                         {"unsup_roi_cls", lb.unsup_roi_cls}};
            std::ofstream out(fs::path(run_dir_) / "diagnostic_dump.json",
                              std::ios::binary);
            out << dump.dump(2) << "\n";
        }
        throw std::runtime_error("training aborted: non-finite loss at iteration " +
                                 std::to_string(iteration));
    }

    apply_sgd_step(grads);
    state_.iteration = iteration;
    return lb;
}

LossBreakdown Trainer::burn_in_step(const std::vector<std::string>& labeled_batch) {
    if (state_.stage != Stage::burn_in)
        throw std::logic_error("burn_in_step: not in burn-in stage");
    if (labeled_batch.empty())
        throw std::invalid_argument("burn_in_step: empty batch");
    return step_impl(labeled_batch, nullptr);
}

void Trainer::init_teacher() {
    if (teacher_initialized_ || state_.stage != Stage::burn_in)
        throw std::logic_error("init_teacher: already called");
    state_.teacher = state_.student;  // deep copy
    state_.stage = Stage::mutual;
    teacher_initialized_ = true;
}

LossBreakdown Trainer::mutual_step(const std::vector<std::string>& labeled_batch,
                                   const std::vector<std::string>& unlabeled_batch) {
    if (labeled_batch.empty())
        throw std::invalid_argument("mutual_step: empty labeled batch");
    if (config_.disable_mutual) {
        // Ablation: reduces to the supervised path (no pseudo-labels, no EMA).
        return step_impl(labeled_batch, nullptr);
    }
    if (state_.stage != Stage::mutual || !state_.teacher.has_value())
        throw std::logic_error("mutual_step: not in mutual stage");
    LossBreakdown lb = step_impl(labeled_batch, &unlabeled_batch);
    ema_update(*state_.teacher, state_.student, config_.ema_alpha);
    return lb;
}

EvalReport Trainer::evaluate_model(const DetectorParams& params) const {
    return evaluate(params, dataset_, dataset_.manifest().test_ids);
}

void Trainer::save_checkpoint(const std::string& path) const {
    TensorArchive archive;
    archive.arch = config_.arch;
    archive.meta["kind"] = "train_state";
    archive.meta["iteration"] = std::to_string(state_.iteration);
    archive.meta["stage"] = state_.stage == Stage::mutual ? "mutual" : "burn_in";
    for (const auto& [name, t] : state_.student.tensors)
        archive.tensors["student/" + name] = t;
    if (state_.teacher)
        for (const auto& [name, t] : state_.teacher->tensors)
            archive.tensors["teacher/" + name] = t;
    for (const auto& [name, t] : state_.momentum)
        archive.tensors["opt/" + name] = t;
    save_archive(path, archive);
}

void Trainer::restore(const std::string& checkpoint_path) {
    TensorArchive archive = load_archive(checkpoint_path);
    if (archive.meta.at("kind") != "train_state")
        throw std::runtime_error("restore: not a training checkpoint");
    state_.iteration = std::stoi(archive.meta.at("iteration"));
    state_.stage =
        archive.meta.at("stage") == "mutual" ? Stage::mutual : Stage::burn_in;
    teacher_initialized_ = state_.stage == Stage::mutual;

    state_.student.arch = archive.arch;
    state_.student.tensors.clear();
    state_.momentum.clear();
    DetectorParams teacher;
    teacher.arch = archive.arch;
    for (auto& [name, t] : archive.tensors) {
        if (name.starts_with("student/"))
            state_.student.tensors[name.substr(8)] = std::move(t);
        else if (name.starts_with("teacher/"))
            teacher.tensors[name.substr(8)] = std::move(t);
        else if (name.starts_with("opt/"))
            state_.momentum[name.substr(4)] = std::move(t);
    }
    if (!teacher.tensors.empty()) state_.teacher = std::move(teacher);
    else state_.teacher.reset();
}

void Trainer::write_metrics_line(const LossBreakdown& lb,
                                 const std::optional<EvalReport>& teacher_eval,
                                 const std::optional<EvalReport>& student_eval,
                                 bool has_pseudo) {
    if (run_dir_.empty()) return;
    json line = {{"iteration", state_.iteration},
                 {"stage", state_.stage == Stage::mutual ? "mutual" : "burn_in"},
                 {"losses",
                  {{"rpn_cls", lb.rpn_cls},
                   {"rpn_reg", lb.rpn_reg},
                   {"roi_cls", lb.roi_cls},
                   {"roi_reg", lb.roi_reg},
                   {"con_loc", lb.con_loc},
                   {"unsup_rpn_cls", lb.unsup_rpn_cls},
                   {"unsup_roi_cls", lb.unsup_roi_cls},
                   {"total", lb.total}}}};
    if (has_pseudo) {
        line["pseudo"] = {{"precision", last_pseudo_.precision},
                          {"recall", last_pseudo_.recall},
                          {"count", last_pseudo_.count}};
    }
    if (teacher_eval || student_eval) {
        json e = json::object();
        if (teacher_eval)
            e["teacher"] = {{"ap50", teacher_eval->ap50},
                            {"map", teacher_eval->ap50_95}};
        if (student_eval)
            e["student"] = {{"ap50", student_eval->ap50},
                            {"map", student_eval->ap50_95}};
        line["eval"] = std::move(e);
    }
    std::ofstream out(fs::path(run_dir_) / "metrics.jsonl",
                      std::ios::binary | std::ios::app);
    out << line.dump() << "\n";
}

TrainResult Trainer::run() {
    const TrainConfig& cfg = config_;
    TrainResult result;
    if (!run_dir_.empty())
        result.metrics_path = (fs::path(run_dir_) / "metrics.jsonl").string();

    std::ofstream timing;
    if (!run_dir_.empty())
        timing.open(fs::path(run_dir_) / "timing.jsonl",
                    std::ios::binary | std::ios::app);
    const auto t_start = std::chrono::steady_clock::now();

    std::optional<EvalReport> last_teacher_eval;
    std::optional<EvalReport> last_student_eval;

    for (int iter = state_.iteration + 1; iter <= cfg.total_iterations; ++iter) {
        const bool burn_phase =
            cfg.disable_mutual || iter <= cfg.burn_in_iterations;
        LossBreakdown lb;
        bool has_pseudo = false;
        if (burn_phase) {
            lb = burn_in_step(sample_labeled_batch(iter));
        } else {
            lb = mutual_step(sample_labeled_batch(iter),
                             sample_unlabeled_batch(iter));
            has_pseudo = true;
        }
        if (!cfg.disable_mutual && iter == cfg.burn_in_iterations &&
            cfg.total_iterations > cfg.burn_in_iterations)
            init_teacher();

        const bool do_eval =
            iter == cfg.total_iterations ||
            (cfg.eval_interval > 0 && iter % cfg.eval_interval == 0);
        std::optional<EvalReport> teacher_eval, student_eval;
        if (do_eval) {
            student_eval = evaluate_model(state_.student);
            if (state_.teacher) teacher_eval = evaluate_model(*state_.teacher);
            last_student_eval = student_eval;
            if (teacher_eval) last_teacher_eval = teacher_eval;
        }
        write_metrics_line(lb, teacher_eval, student_eval, has_pseudo);
        if (timing.is_open()) {
            const double sec = std::chrono::duration<double>(
                                   std::chrono::steady_clock::now() - t_start)
                                   .count();
            timing << "{\"iteration\":" << iter << ",\"wall_clock_sec\":" << sec
                   << "}\n";
        }

        if (!run_dir_.empty() && cfg.dump_pseudo && has_pseudo && do_eval) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter_%06d.jsonl", iter);
            std::ofstream dump(fs::path(run_dir_) / "pseudo_dumps" / name,
                               std::ios::binary);
            for (const auto& pls : last_pls_)
                dump << pseudo_labels_to_json_line(pls, iter) << "\n";
        }

        const bool do_checkpoint =
            !run_dir_.empty() &&
            (iter == cfg.total_iterations ||
             (cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0));
        if (do_checkpoint) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter_%06d.ckpt", iter);
            const std::string path =
                (fs::path(run_dir_) / "checkpoints" / name).string();
            save_checkpoint(path);
            result.checkpoint_path = path;
        }
    }

    if (!last_student_eval) {
        last_student_eval = evaluate_model(state_.student);
        if (state_.teacher) last_teacher_eval = evaluate_model(*state_.teacher);
    }
    result.final_student_eval = *last_student_eval;
    result.final_teacher_eval = last_teacher_eval;
    return result;
}

TrainResult train(const TrainConfig& config, const Dataset& dataset,
                  const std::string& run_dir,
                  const std::string& resume_checkpoint) {
    Trainer trainer(config, dataset, run_dir);
    if (!resume_checkpoint.empty()) trainer.restore(resume_checkpoint);
    return trainer.run();
}

}  // namespace lbt
