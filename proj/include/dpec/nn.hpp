#pragma once

#include <optional>

#include "dpec/ops.hpp"

namespace dpec {

template <typename S>
struct Conv2dParams {
  Var<S> weight;  // [Cout, Cin/groups, kh, kw]
  std::optional<Var<S>> bias;  // [Cout]
  Index stride = 1;
  Index padding = 0;  // zero padding on all four sides
  Index groups = 1;
};

template <typename S>
struct LayerNormParams {
  Var<S> gamma;  // [C]
  Var<S> beta;   // [C]
  S eps = S(1e-5);
};

template <typename S>
struct LinearParams {
  Var<S> weight;  // [in, out]
  std::optional<Var<S>> bias;  // [out]
};

/// Cross-correlation over NCHW input. groups == Cin gives a depthwise conv.
template <typename S> Var<S> conv2d(const Var<S>& x, const Conv2dParams<S>& p);
/// Depthwise conv, weight [C,1,kh,kw], stride 1, "same" zero padding for odd kernels.
template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias);

/// Normalises over the last axis.
template <typename S> Var<S> layernorm(const Var<S>& x, const LayerNormParams<S>& p);
/// x[..., in] -> [..., out]
template <typename S> Var<S> linear(const Var<S>& x, const LinearParams<S>& p);

template <typename S> Var<S> to_nhwc(const Var<S>& x) { return permute(x, {0, 2, 3, 1}); }
template <typename S> Var<S> to_nchw(const Var<S>& x) { return permute(x, {0, 3, 1, 2}); }

/// [N,h,w,f*f*C] -> [N,h*f,w*f,C]; channel index decomposes as (row, col, c).
template <typename S> Var<S> pixel_shuffle_nhwc(const Var<S>& x, Index factor);

/// Non-overlapping 4x4 patches via a stride-4 conv to C channels, then layernorm.
/// img [N,3,H,W] -> [N,H/4,W/4,C]
template <typename S>
Var<S> patch_embed(const Var<S>& img, const Conv2dParams<S>& conv, const LayerNormParams<S>& norm);
/// [N,h,w,C] -> [N,h/2,w/2,2C]: gather 2x2 neighbourhoods (4C), layernorm, linear 4C->2C.
template <typename S>
Var<S> patch_merge(const Var<S>& x, const LayerNormParams<S>& norm, const LinearParams<S>& reduce);
/// [N,h,w,C] -> [N,h*f,w*f,C'] with C' = out_features / f^2 of the linear map.
template <typename S> Var<S> patch_expand(const Var<S>& x, const LinearParams<S>& proj, Index factor);

/// Half-pixel (align_corners = false) bilinear resampling of NCHW input.
template <typename S> Var<S> resize_bilinear(const Var<S>& x, Index out_h, Index out_w);
template <typename S> Var<S> upsample_nearest2x(const Var<S>& x);
/// Adaptive average pooling with floor/ceil bin edges.
template <typename S> Var<S> adaptive_avg_pool2d(const Var<S>& x, Index out_h, Index out_w);
/// Valid k x k sliding minimum, stride 1. Ties route to the first (row-major) position.
template <typename S> Var<S> min_pool2d(const Var<S>& x, Index k);

/// Normalised 1-D Gaussian taps, length `size`.
std::vector<double> gaussian_taps(Index size, double sigma);

}  // namespace dpec
