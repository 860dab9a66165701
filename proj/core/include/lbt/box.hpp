#pragma once

#include <cstddef>
#include <vector>

namespace lbt {

// Axis-aligned box in pixel coordinates, corner convention, half-open:
// the box covers [x1, x2) x [y1, y2). Valid boxes have positive extent.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool valid() const;
};

// A scored, classified box. class_id indexes foreground classes only.
struct Detection {
    Box box;
    int class_id = 0;
    double score = 0.0;
};

// Box regression parameterization: normalized center displacement plus
// log-scale width/height ratios.
struct DeltaVector {
    double dcx = 0, dcy = 0, dw = 0, dh = 0;
};

// Intersection-over-union. Half-open convention, so boxes that merely touch
// have IoU 0.
double iou(const Box& a, const Box& b);

// Reflect the box across the vertical midline of an image of the given width.
Box hflip_box(const Box& b, double image_width);

// dcx = (cx_t - cx_a) / w_a, dcy = (cy_t - cy_a) / h_a,
// dw = ln(w_t / w_a), dh = ln(h_t / h_a).
DeltaVector encode_deltas(const Box& anchor, const Box& target);

// Exact inverse of encode_deltas.
Box decode_deltas(const Box& anchor, const DeltaVector& d);

// decode_deltas clipped to [0, clip_w) x [0, clip_h), with a minimum extent
// so the result is always a valid Box.
Box decode_deltas_clipped(const Box& anchor, const DeltaVector& d,
                          double clip_w, double clip_h);

// The flip correction for deltas: a horizontally mirrored candidate pair has
// its center displacement negated in x while the other components carry over.
DeltaVector mirror_delta(const DeltaVector& d);

// Greedy non-maximum suppression. Detections are considered in deterministic
// order (score desc, class_id asc, x1 asc); one is kept iff its IoU with every
// already-kept detection (of the same class when classwise) is < iou_threshold.
// Returns indices into `dets` in keep order.
std::vector<std::size_t> nms(const std::vector<Detection>& dets,
                             double iou_threshold, bool classwise);

}  // namespace lbt
