#include "lbt/box.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lbt {

bool Box::valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x2 > x1 && y2 > y1;
}

double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

Box hflip_box(const Box& b, double image_width) {
    return Box{image_width - b.x2, b.y1, image_width - b.x1, b.y2};
}

DeltaVector encode_deltas(const Box& anchor, const Box& target) {
    const double wa = anchor.width();
    const double ha = anchor.height();
    return DeltaVector{
        (target.cx() - anchor.cx()) / wa,
        (target.cy() - anchor.cy()) / ha,
        std::log(target.width() / wa),
        std::log(target.height() / ha),
    };
}

Box decode_deltas(const Box& anchor, const DeltaVector& d) {
    const double cx = anchor.cx() + d.dcx * anchor.width();
    const double cy = anchor.cy() + d.dcy * anchor.height();
    const double w = anchor.width() * std::exp(d.dw);
    const double h = anchor.height() * std::exp(d.dh);
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box decode_deltas_clipped(const Box& anchor, const DeltaVector& d,
                          double clip_w, double clip_h) {
    constexpr double kMinExtent = 1e-3;
    Box b = decode_deltas(anchor, d);
    b.x1 = std::clamp(b.x1, 0.0, clip_w - kMinExtent);
    b.y1 = std::clamp(b.y1, 0.0, clip_h - kMinExtent);
    b.x2 = std::clamp(b.x2, kMinExtent, clip_w);
    b.y2 = std::clamp(b.y2, kMinExtent, clip_h);
    if (b.x2 - b.x1 < kMinExtent) b.x2 = b.x1 + kMinExtent;
    if (b.y2 - b.y1 < kMinExtent) b.y2 = b.y1 + kMinExtent;
    return b;
}

DeltaVector mirror_delta(const DeltaVector& d) {
    return DeltaVector{-d.dcx, d.dcy, d.dw, d.dh};
}

std::vector<std::size_t> nms(const std::vector<Detection>& dets,
                             double iou_threshold, bool classwise) {
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
        throw std::invalid_argument("nms: iou_threshold must be in (0,1)");

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        if (dets[a].class_id != dets[b].class_id)
            return dets[a].class_id < dets[b].class_id;
        if (dets[a].box.x1 != dets[b].box.x1) return dets[a].box.x1 < dets[b].box.x1;
        return a < b;
    });

    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (std::size_t k : kept) {
            if (classwise && dets[k].class_id != dets[idx].class_id) continue;
            if (iou(dets[k].box, dets[idx].box) >= iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(idx);
    }
    return kept;
}

}  // namespace lbt
