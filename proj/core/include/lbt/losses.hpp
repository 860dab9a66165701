#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lbt/box.hpp"

namespace lbt {

// Per-step scalar objective values. Absent terms stay 0; `total` is the
// weighted sum assembled by burn_in_total / mutual_total.
struct LossBreakdown {
    double rpn_cls = 0;
    double rpn_reg = 0;
    double roi_cls = 0;
    double roi_reg = 0;
    double con_loc = 0;
    double unsup_rpn_cls = 0;
    double unsup_roi_cls = 0;
    double total = 0;

    double supervised_total() const {
        return rpn_cls + rpn_reg + roi_cls + roi_reg;
    }
};

struct LossWeights {
    double lambda_unsup = 2.0;   // unsupervised loss weight
    double lambda_con = 1.0;     // consistency localization weight
    double focal_gamma = 2.0;
    double tau_bg = 0.9;         // background mask threshold, in (0,1)
};

// Probabilities are clamped to >= kProbFloor before every log.
inline constexpr double kProbFloor = 1e-12;

// -(1 - p_t)^gamma * ln(p_t) with p_t = probs[target_class].
double focal_loss(std::span<const double> probs, int target_class, double gamma);

// Gradient of focal_loss w.r.t. the probability vector. Only the target entry
// is nonzero: gamma*(1-p)^(gamma-1)*ln(p) - (1-p)^gamma / p.
std::vector<double> focal_loss_grad(std::span<const double> probs,
                                    int target_class, double gamma);

// -ln(p_t); identical to focal_loss with gamma = 0.
double cross_entropy(std::span<const double> probs, int target_class);
std::vector<double> cross_entropy_grad(std::span<const double> probs,
                                       int target_class);

// Summed over the four delta components; per component
// 0.5 x^2 / beta for |x| < beta, else |x| - 0.5 beta.
double smooth_l1(const DeltaVector& pred, const DeltaVector& target, double beta);

// Gradient of smooth_l1 w.r.t. pred (the gradient w.r.t. target is the
// negation).
DeltaVector smooth_l1_grad(const DeltaVector& pred, const DeltaVector& target,
                           double beta);

// mask[i] = 1 iff the candidate participates in consistency losses, i.e. its
// background probability (last entry of the vector) is below tau_bg. The
// boundary p_bg == tau_bg masks out.
std::vector<std::uint8_t> background_mask(
    const std::vector<std::vector<double>>& class_probs_per_candidate,
    double tau_bg);

// Flip-consistency localization loss: mean over unmasked index-paired
// candidates of 1/4 [(dcx + dcx')^2 + (dcy - dcy')^2 + (dw - dw')^2 +
// (dh - dh')^2]. Zero when no pair survives the mask.
double consistency_loc_loss(std::span<const DeltaVector> deltas_orig,
                            std::span<const DeltaVector> deltas_flip,
                            std::span<const std::uint8_t> mask);

// Gradients of consistency_loc_loss w.r.t. both delta lists.
struct ConsistencyLocGrad {
    std::vector<DeltaVector> d_orig;
    std::vector<DeltaVector> d_flip;
};
ConsistencyLocGrad consistency_loc_loss_grad(
    std::span<const DeltaVector> deltas_orig,
    std::span<const DeltaVector> deltas_flip,
    std::span<const std::uint8_t> mask);

// total = rpn_cls + rpn_reg + roi_cls + roi_reg + lambda_con * con_loc.
LossBreakdown burn_in_total(const LossBreakdown& components,
                            const LossWeights& weights);

// total = supervised four-term sum + lambda_unsup * (unsup_rpn_cls +
// unsup_roi_cls) + lambda_con * con_loc.
LossBreakdown mutual_total(const LossBreakdown& sup, double unsup_rpn_cls,
                           double unsup_roi_cls, double con_loc,
                           const LossWeights& weights);

}  // namespace lbt
