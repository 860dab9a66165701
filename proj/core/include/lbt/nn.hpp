#pragma once

#include <cstddef>

#include "lbt/box.hpp"

namespace lbt::nn {

// Plain CHW kernels backing the detector. Every backward accumulates into its
// gradient outputs, so callers zero the buffers once per step. Gradient
// pointers may be null to skip that input (e.g. no image gradient).

// 3x3 convolution, padding 1. out is [cout, oh, ow] with
// oh = (h - 1) / stride + 1.
void conv3x3_forward(const double* in, int cin, int h, int w,
                     const double* weight, const double* bias, int cout,
                     int stride, double* out, int oh, int ow);
void conv3x3_backward(const double* in, int cin, int h, int w,
                      const double* weight, int cout, int stride,
                      const double* dout, int oh, int ow, double* din,
                      double* dweight, double* dbias);

// 1x1 convolution: a channel mix applied at every spatial position.
void conv1x1_forward(const double* in, int cin, int hw, const double* weight,
                     const double* bias, int cout, double* out);
void conv1x1_backward(const double* in, int cin, int hw, const double* weight,
                      int cout, const double* dout, double* din,
                      double* dweight, double* dbias);

void relu_inplace(double* x, std::size_t n);
// dy[i] := dy[i] * (post_relu[i] > 0)
void relu_backward_inplace(const double* post_relu, double* dy, std::size_t n);

// Fully connected: weight is [n_out, n_in].
void linear_forward(const double* in, int n_in, const double* weight,
                    const double* bias, int n_out, double* out);
void linear_backward(const double* in, int n_in, const double* weight,
                     int n_out, const double* dout, double* din,
                     double* dweight, double* dbias);

// Bilinear crop-resize of a box (image pixel coordinates) from a CHW feature
// map with the given stride. out is [c, pool, pool]. Sample positions are bin
// centers; out-of-range samples clamp to the border.
void roi_align_forward(const double* feat, int c, int fh, int fw, double stride,
                       const Box& box, int pool, double* out);
void roi_align_backward(int c, int fh, int fw, double stride, const Box& box,
                        int pool, const double* dout, double* dfeat);

void softmax(const double* logits, int n, double* probs);
// dlogit_j = p_j * (dprob_j - sum_i dprob_i * p_i), accumulated into dlogits.
void softmax_backward(const double* probs, int n, const double* dprobs,
                      double* dlogits);

double sigmoid(double x);
// Numerically stable binary cross-entropy from the logit; y is 0 or 1.
double bce_with_logit(double logit, double y);

}  // namespace lbt::nn
