#include "lbt/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace lbt {

namespace {

double target_prob(std::span<const double> probs, int target_class) {
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= probs.size())
        throw std::out_of_range("loss: target_class outside probability vector");
    return std::max(probs[static_cast<std::size_t>(target_class)], kProbFloor);
}

}  // namespace

double focal_loss(std::span<const double> probs, int target_class, double gamma) {
    const double p = target_prob(probs, target_class);
    return -std::pow(1.0 - p, gamma) * std::log(p);
}

std::vector<double> focal_loss_grad(std::span<const double> probs,
                                    int target_class, double gamma) {
    std::vector<double> g(probs.size(), 0.0);
    const double p = target_prob(probs, target_class);
    if (probs[static_cast<std::size_t>(target_class)] <= kProbFloor) return g;
    const double one_minus = 1.0 - p;
    double d = -std::pow(one_minus, gamma) / p;
    if (gamma != 0.0)
        d += gamma * std::pow(one_minus, gamma - 1.0) * std::log(p);
    g[static_cast<std::size_t>(target_class)] = d;
    return g;
}

double cross_entropy(std::span<const double> probs, int target_class) {
    return -std::log(target_prob(probs, target_class));
}

std::vector<double> cross_entropy_grad(std::span<const double> probs,
                                       int target_class) {
    return focal_loss_grad(probs, target_class, 0.0);
}

double smooth_l1(const DeltaVector& pred, const DeltaVector& target, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
    const double r[4] = {pred.dcx - target.dcx, pred.dcy - target.dcy,
                         pred.dw - target.dw, pred.dh - target.dh};
    double sum = 0.0;
    for (double x : r) {
        const double ax = std::abs(x);
        sum += ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
    }
    return sum;
}

DeltaVector smooth_l1_grad(const DeltaVector& pred, const DeltaVector& target,
                           double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be > 0");
    const double r[4] = {pred.dcx - target.dcx, pred.dcy - target.dcy,
                         pred.dw - target.dw, pred.dh - target.dh};
    double g[4];
    for (int i = 0; i < 4; ++i) {
        const double x = r[i];
        g[i] = std::abs(x) < beta ? x / beta : (x > 0.0 ? 1.0 : -1.0);
    }
    return DeltaVector{g[0], g[1], g[2], g[3]};
}

std::vector<std::uint8_t> background_mask(
    const std::vector<std::vector<double>>& class_probs_per_candidate,
    double tau_bg) {
    if (!(tau_bg > 0.0 && tau_bg < 1.0))
        throw std::invalid_argument("background_mask: tau_bg must be in (0,1)");
    std::vector<std::uint8_t> mask(class_probs_per_candidate.size(), 0);
    for (std::size_t i = 0; i < class_probs_per_candidate.size(); ++i) {
        const auto& probs = class_probs_per_candidate[i];
        if (probs.empty())
            throw std::invalid_argument("background_mask: empty probability vector");
        mask[i] = probs.back() < tau_bg ? 1 : 0;
    }
    return mask;
}

double consistency_loc_loss(std::span<const DeltaVector> deltas_orig,
                            std::span<const DeltaVector> deltas_flip,
                            std::span<const std::uint8_t> mask) {
    if (deltas_orig.size() != deltas_flip.size() ||
        deltas_orig.size() != mask.size())
        throw std::invalid_argument("consistency_loc_loss: length mismatch");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < deltas_orig.size(); ++i) {
        if (!mask[i]) continue;
        const DeltaVector& a = deltas_orig[i];
        const DeltaVector& b = deltas_flip[i];
        const double ex = a.dcx + b.dcx;  // flipped dcx runs the opposite way
        const double ey = a.dcy - b.dcy;
        const double ew = a.dw - b.dw;
        const double eh = a.dh - b.dh;
        sum += 0.25 * (ex * ex + ey * ey + ew * ew + eh * eh);
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

ConsistencyLocGrad consistency_loc_loss_grad(
    std::span<const DeltaVector> deltas_orig,
    std::span<const DeltaVector> deltas_flip,
    std::span<const std::uint8_t> mask) {
    if (deltas_orig.size() != deltas_flip.size() ||
        deltas_orig.size() != mask.size())
        throw std::invalid_argument("consistency_loc_loss: length mismatch");
    ConsistencyLocGrad g;
    g.d_orig.assign(deltas_orig.size(), DeltaVector{});
    g.d_flip.assign(deltas_flip.size(), DeltaVector{});
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) ++n;
    if (n == 0) return g;
    const double scale = 0.5 / static_cast<double>(n);  // d/dx of x^2/4 / n
    for (std::size_t i = 0; i < deltas_orig.size(); ++i) {
        if (!mask[i]) continue;
        const DeltaVector& a = deltas_orig[i];
        const DeltaVector& b = deltas_flip[i];
        const double ex = a.dcx + b.dcx;
        const double ey = a.dcy - b.dcy;
        const double ew = a.dw - b.dw;
        const double eh = a.dh - b.dh;
        g.d_orig[i] = DeltaVector{scale * ex, scale * ey, scale * ew, scale * eh};
        g.d_flip[i] = DeltaVector{scale * ex, -scale * ey, -scale * ew, -scale * eh};
    }
    return g;
}

LossBreakdown burn_in_total(const LossBreakdown& components,
                            const LossWeights& weights) {
    LossBreakdown out = components;
    out.unsup_rpn_cls = 0;
    out.unsup_roi_cls = 0;
    out.total = out.supervised_total() + weights.lambda_con * out.con_loc;
    return out;
}

LossBreakdown mutual_total(const LossBreakdown& sup, double unsup_rpn_cls,
                           double unsup_roi_cls, double con_loc,
                           const LossWeights& weights) {
    LossBreakdown out = sup;
    out.unsup_rpn_cls = unsup_rpn_cls;
    out.unsup_roi_cls = unsup_roi_cls;
    out.con_loc = con_loc;
    out.total = out.supervised_total() +
                weights.lambda_unsup * (unsup_rpn_cls + unsup_roi_cls) +
                weights.lambda_con * con_loc;
    return out;
}

}  // namespace lbt
