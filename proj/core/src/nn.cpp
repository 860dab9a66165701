#include "lbt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace lbt::nn {

namespace {

// Valid output range [lo, hi] such that ix = ox*stride + k - 1 lands in [0, w).
inline void valid_range(int k, int stride, int w, int ow, int& lo, int& hi) {
    lo = 0;
    while (lo < ow && lo * stride + k - 1 < 0) ++lo;
    hi = ow - 1;
    while (hi >= 0 && hi * stride + k - 1 >= w) --hi;
}

}  // namespace

void conv3x3_forward(const double* in, int cin, int h, int w,
                     const double* weight, const double* bias, int cout,
                     int stride, double* out, int oh, int ow) {
    for (int oc = 0; oc < cout; ++oc) {
        double* out_plane = out + static_cast<std::size_t>(oc) * oh * ow;
        std::fill(out_plane, out_plane + static_cast<std::size_t>(oh) * ow,
                  bias ? bias[oc] : 0.0);
        for (int ic = 0; ic < cin; ++ic) {
            const double* in_plane = in + static_cast<std::size_t>(ic) * h * w;
            const double* wk =
                weight + (static_cast<std::size_t>(oc) * cin + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = wk[ky * 3 + kx];
                    int lo, hi;
                    valid_range(kx, stride, w, ow, lo, hi);
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        const double* in_row =
                            in_plane + static_cast<std::size_t>(iy) * w + (kx - 1);
                        double* out_row =
                            out_plane + static_cast<std::size_t>(oy) * ow;
                        for (int ox = lo; ox <= hi; ++ox)
                            out_row[ox] += wv * in_row[ox * stride];
                    }
                }
            }
        }
    }
}

void conv3x3_backward(const double* in, int cin, int h, int w,
                      const double* weight, int cout, int stride,
                      const double* dout, int oh, int ow, double* din,
                      double* dweight, double* dbias) {
    for (int oc = 0; oc < cout; ++oc) {
        const double* dout_plane = dout + static_cast<std::size_t>(oc) * oh * ow;
        if (dbias) {
            double acc = 0;
            for (std::size_t i = 0; i < static_cast<std::size_t>(oh) * ow; ++i)
                acc += dout_plane[i];
            dbias[oc] += acc;
        }
        for (int ic = 0; ic < cin; ++ic) {
            const double* in_plane = in + static_cast<std::size_t>(ic) * h * w;
            double* din_plane =
                din ? din + static_cast<std::size_t>(ic) * h * w : nullptr;
            const std::size_t wbase = (static_cast<std::size_t>(oc) * cin + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    int lo, hi;
                    valid_range(kx, stride, w, ow, lo, hi);
                    const double wv = weight[wbase + ky * 3 + kx];
                    double dw_acc = 0;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        const double* in_row =
                            in_plane + static_cast<std::size_t>(iy) * w + (kx - 1);
                        const double* dout_row =
                            dout_plane + static_cast<std::size_t>(oy) * ow;
                        if (dweight) {
                            for (int ox = lo; ox <= hi; ++ox)
                                dw_acc += dout_row[ox] * in_row[ox * stride];
                        }
                        if (din_plane) {
                            double* din_row =
                                din_plane + static_cast<std::size_t>(iy) * w + (kx - 1);
                            for (int ox = lo; ox <= hi; ++ox)
                                din_row[ox * stride] += wv * dout_row[ox];
                        }
                    }
                    if (dweight) dweight[wbase + ky * 3 + kx] += dw_acc;
                }
            }
        }
    }
}

void conv1x1_forward(const double* in, int cin, int hw, const double* weight,
                     const double* bias, int cout, double* out) {
    for (int oc = 0; oc < cout; ++oc) {
        double* out_row = out + static_cast<std::size_t>(oc) * hw;
        std::fill(out_row, out_row + hw, bias ? bias[oc] : 0.0);
        for (int ic = 0; ic < cin; ++ic) {
            const double wv = weight[static_cast<std::size_t>(oc) * cin + ic];
            const double* in_row = in + static_cast<std::size_t>(ic) * hw;
            for (int i = 0; i < hw; ++i) out_row[i] += wv * in_row[i];
        }
    }
}

void conv1x1_backward(const double* in, int cin, int hw, const double* weight,
                      int cout, const double* dout, double* din,
                      double* dweight, double* dbias) {
    for (int oc = 0; oc < cout; ++oc) {
        const double* dout_row = dout + static_cast<std::size_t>(oc) * hw;
        if (dbias) {
            double acc = 0;
            for (int i = 0; i < hw; ++i) acc += dout_row[i];
            dbias[oc] += acc;
        }
        for (int ic = 0; ic < cin; ++ic) {
            const double* in_row = in + static_cast<std::size_t>(ic) * hw;
            const double wv = weight[static_cast<std::size_t>(oc) * cin + ic];
            if (dweight) {
                double acc = 0;
                for (int i = 0; i < hw; ++i) acc += dout_row[i] * in_row[i];
                dweight[static_cast<std::size_t>(oc) * cin + ic] += acc;
            }
            if (din) {
                double* din_row = din + static_cast<std::size_t>(ic) * hw;
                for (int i = 0; i < hw; ++i) din_row[i] += wv * dout_row[i];
            }
        }
    }
}

void relu_inplace(double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (x[i] < 0) x[i] = 0;
}

void relu_backward_inplace(const double* post_relu, double* dy, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (post_relu[i] <= 0) dy[i] = 0;
}

void linear_forward(const double* in, int n_in, const double* weight,
                    const double* bias, int n_out, double* out) {
    for (int o = 0; o < n_out; ++o) {
        const double* wrow = weight + static_cast<std::size_t>(o) * n_in;
        double acc = bias ? bias[o] : 0.0;
        for (int i = 0; i < n_in; ++i) acc += wrow[i] * in[i];
        out[o] = acc;
    }
}

void linear_backward(const double* in, int n_in, const double* weight,
                     int n_out, const double* dout, double* din,
                     double* dweight, double* dbias) {
    for (int o = 0; o < n_out; ++o) {
        const double g = dout[o];
        if (dbias) dbias[o] += g;
        const double* wrow = weight + static_cast<std::size_t>(o) * n_in;
        double* dwrow =
            dweight ? dweight + static_cast<std::size_t>(o) * n_in : nullptr;
        for (int i = 0; i < n_in; ++i) {
            if (dwrow) dwrow[i] += g * in[i];
            if (din) din[i] += g * wrow[i];
        }
    }
}

namespace {

struct BilinearTap {
    int x0, x1, y0, y1;
    double wx, wy;
};

inline BilinearTap tap(double fx, double fy, int fw, int fh) {
    BilinearTap t;
    const double x = std::clamp(fx, 0.0, fw - 1.0);
    const double y = std::clamp(fy, 0.0, fh - 1.0);
    t.x0 = std::min(static_cast<int>(x), fw - 1);
    t.y0 = std::min(static_cast<int>(y), fh - 1);
    t.x1 = std::min(t.x0 + 1, fw - 1);
    t.y1 = std::min(t.y0 + 1, fh - 1);
    t.wx = x - t.x0;
    t.wy = y - t.y0;
    return t;
}

}  // namespace

void roi_align_forward(const double* feat, int c, int fh, int fw, double stride,
                       const Box& box, int pool, double* out) {
    const double bw = box.width() / pool;
    const double bh = box.height() / pool;
    for (int py = 0; py < pool; ++py) {
        for (int px = 0; px < pool; ++px) {
            const double img_x = box.x1 + (px + 0.5) * bw;
            const double img_y = box.y1 + (py + 0.5) * bh;
            const BilinearTap t =
                tap(img_x / stride - 0.5, img_y / stride - 0.5, fw, fh);
            for (int ch = 0; ch < c; ++ch) {
                const double* plane = feat + static_cast<std::size_t>(ch) * fh * fw;
                const double v00 = plane[t.y0 * fw + t.x0];
                const double v01 = plane[t.y0 * fw + t.x1];
                const double v10 = plane[t.y1 * fw + t.x0];
                const double v11 = plane[t.y1 * fw + t.x1];
                const double top = v00 * (1 - t.wx) + v01 * t.wx;
                const double bot = v10 * (1 - t.wx) + v11 * t.wx;
                out[(static_cast<std::size_t>(ch) * pool + py) * pool + px] =
                    top * (1 - t.wy) + bot * t.wy;
            }
        }
    }
}

void roi_align_backward(int c, int fh, int fw, double stride, const Box& box,
                        int pool, const double* dout, double* dfeat) {
    const double bw = box.width() / pool;
    const double bh = box.height() / pool;
    for (int py = 0; py < pool; ++py) {
        for (int px = 0; px < pool; ++px) {
            const double img_x = box.x1 + (px + 0.5) * bw;
            const double img_y = box.y1 + (py + 0.5) * bh;
            const BilinearTap t =
                tap(img_x / stride - 0.5, img_y / stride - 0.5, fw, fh);
            for (int ch = 0; ch < c; ++ch) {
                double* plane = dfeat + static_cast<std::size_t>(ch) * fh * fw;
                const double g =
                    dout[(static_cast<std::size_t>(ch) * pool + py) * pool + px];
                plane[t.y0 * fw + t.x0] += g * (1 - t.wx) * (1 - t.wy);
                plane[t.y0 * fw + t.x1] += g * t.wx * (1 - t.wy);
                plane[t.y1 * fw + t.x0] += g * (1 - t.wx) * t.wy;
                plane[t.y1 * fw + t.x1] += g * t.wx * t.wy;
            }
        }
    }
}

void softmax(const double* logits, int n, double* probs) {
    double m = logits[0];
    for (int i = 1; i < n; ++i) m = std::max(m, logits[i]);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        probs[i] = std::exp(logits[i] - m);
        sum += probs[i];
    }
    for (int i = 0; i < n; ++i) probs[i] /= sum;
}

void softmax_backward(const double* probs, int n, const double* dprobs,
                      double* dlogits) {
    double dot = 0;
    for (int i = 0; i < n; ++i) dot += dprobs[i] * probs[i];
    for (int i = 0; i < n; ++i) dlogits[i] += probs[i] * (dprobs[i] - dot);
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double bce_with_logit(double logit, double y) {
    // max(z,0) - y*z + log(1 + exp(-|z|))
    return std::max(logit, 0.0) - y * logit + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace lbt::nn
