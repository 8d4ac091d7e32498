#pragma once

#include <array>
#include <string>
#include <vector>

#include "dpec/params.hpp"
#include "dpec/ss2d.hpp"

namespace dpec {

enum class EnhanceMode { dpec, dpec_retinex };

const char* to_string(EnhanceMode mode);
EnhanceMode parse_enhance_mode(const std::string& text);

/// Brightness Error Estimator layout.
struct BeeConfig {
  Index channels = 96;
  std::array<int, 2> encoder_blocks{2, 3};
  std::array<int, 2> decoder_blocks{3, 2};
  Index d_state = 16;
  Index ssm_expand = 2;
  bool mff = true;
  bool shared_directions = true;

  /// C=8, one VSS block per stage: the configuration used for gradient checks.
  static BeeConfig reduced();
  bool operator==(const BeeConfig&) const = default;
};

struct DenoiseConfig {
  Index features = 64;
  int blocks = 4;
  Index frequencies = 16;  // DCT frequency groups used by the channel attention
  double gamma = 0.4;
  Index dark_window = 7;
  double omega = 0.1;

  bool operator==(const DenoiseConfig&) const = default;
};

struct ModelConfig {
  BeeConfig bee;
  DenoiseConfig denoise;
  bool use_denoiser = true;
  EnhanceMode mode = EnhanceMode::dpec;

  bool operator==(const ModelConfig&) const = default;
};

std::vector<ParamSpec> vss_block_param_specs(const std::string& prefix, Index dim, const BeeConfig& cfg);
std::vector<ParamSpec> bee_param_specs(const BeeConfig& cfg);
std::vector<ParamSpec> denoise_param_specs(const DenoiseConfig& cfg);

/// Gated residual block around SS2D. x [N,h,w,D] -> same shape.
template <typename S>
Var<S> vss_block(const Var<S>& x, Binder<S>& params, const std::string& prefix, const BeeConfig& cfg);

/// Estimated additive error E(img). img [N,3,H,W] -> [N,3,H,W]; any H,W >= 1 (reflect-padded to /8).
template <typename S>
Var<S> bee_forward(const Var<S>& img, Binder<S>& params, const BeeConfig& cfg);

/// Gamma curve clamp(img, 0, 1)^gamma.
template <typename S> Var<S> brighten(const Var<S>& img, S gamma = S(0.4));

/// Orthonormal 8x8 type-II DCT and its inverse.
template <typename S> Tensor<S> dct2d_8x8(const Tensor<S>& block);
template <typename S> Tensor<S> idct2d_8x8(const Tensor<S>& coeffs);
/// The `count` lowest frequencies in JPEG zig-zag order, as (u, v) = (row, column) pairs.
std::vector<std::array<Index, 2>> zigzag_frequencies(Index count);
/// 8x8 orthonormal DCT basis function for frequency (u, v).
template <typename S> Tensor<S> dct_basis(Index u, Index v);

/// Multi-spectral channel attention. x [N,F,h,w] -> same shape.
template <typename S>
Var<S> mca(const Var<S>& x, Binder<S>& params, const std::string& prefix, const DenoiseConfig& cfg);

/// clamp(img - omega * dark, 0, 1) with dark = window x window min of the channel minimum.
template <typename S>
Var<S> dark_channel_refine(const Var<S>& img, Index window = 7, S omega = S(0.1));

template <typename S>
Var<S> denoise_forward(const Var<S>& img, Binder<S>& params, const DenoiseConfig& cfg);

/// Unclamped fusion of a base image with the BEE output (used as the training prediction).
template <typename S>
Var<S> fuse(const Var<S>& base, const Var<S>& error, EnhanceMode mode);

/// Full inference path. Stage 2 needs `denoiser` (MissingDenoiser otherwise).
template <typename S>
Var<S> enhance(const Var<S>& img, Binder<S>& bee, Binder<S>* denoiser, const ModelConfig& cfg,
               EnhanceMode mode, int stage);

}  // namespace dpec
