#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpec/nn.hpp"

namespace dpec {

inline constexpr Index kHistogramBins = 256;
inline constexpr double kReflectanceEps = 1e-3;
inline constexpr double kReflectanceMax = 4.0;

/// Normalised histogram of every element of x over [lo, hi] with a triangular
/// kernel one bin wide centred on each bin centre. Inputs are clamped to the
/// outermost bin centres, so the mass is always 1.
template <typename S>
Var<S> soft_histogram(const Var<S>& x, Index bins = kHistogramBins, S lo = S(0), S hi = S(1));

/// Counting histogram, bin = floor((x - lo) / width) clamped to [0, bins-1], normalised.
template <typename S>
std::vector<double> hard_histogram(const Tensor<S>& x, Index bins = kHistogramBins, double lo = 0.0,
                                   double hi = 1.0);

/// Illumination estimate of a reference: 19-tap Gaussian (sigma 3, reflect edges)
/// of the per-pixel channel maximum. [N,C,H,W] -> [N,1,H,W].
template <typename S> Tensor<S> illumination_map(const Tensor<S>& img);

/// Gradients reach pred and low only; target is treated as a constant.
template <typename S>
Var<S> loss_his_retinex(const Var<S>& pred, const Var<S>& target, const Var<S>& low);

/// 1 - mean SSIM over valid Gaussian windows (size min(11, H, W), sigma 1.5).
template <typename S> Var<S> loss_ssim(const Var<S>& pred, const Var<S>& target);

/// Frozen, seeded convolutional feature bank: 3 -> 16 -> 32 -> 64 channels,
/// each stage a 3x3 stride-2 conv followed by SiLU.
template <typename S>
struct PerceptualBank {
  std::vector<Tensor<S>> weights;

  static PerceptualBank make(std::uint64_t seed = kDefaultSeed);
  static constexpr std::uint64_t kDefaultSeed = 0x7065726370ULL;
};

template <typename S>
Var<S> loss_perceptual(const Var<S>& pred, const Var<S>& target, const PerceptualBank<S>& bank);

/// Isotropic TV with forward differences (missing neighbours count as zero),
/// summed over pixels and averaged over images and channels.
template <typename S> Var<S> loss_tv(const Var<S>& pred);

template <typename S> Var<S> loss_smooth_l1(const Var<S>& pred, const Var<S>& target);

/// <pred, low> / numel, or its negation.
template <typename S> Var<S> loss_inner(const Var<S>& pred, const Var<S>& low, bool negate = false);

enum class LossTerm { ssim, perceptual, inner, his, tv, smooth };
inline constexpr std::array<LossTerm, 6> kLossTerms{LossTerm::ssim, LossTerm::perceptual, LossTerm::inner,
                                                    LossTerm::his, LossTerm::tv, LossTerm::smooth};
const char* to_string(LossTerm term);

struct LossWeights {
  double ssim = 2.0;
  double perceptual = 1.2;
  double inner = 1.0;
  double his = 1.0;
  double tv = 0.01;
  double smooth = 0.8;

  double get(LossTerm term) const;
  double& get(LossTerm term);
  bool operator==(const LossWeights&) const = default;
};

struct LossToggles {
  bool ssim = true;
  bool perceptual = true;
  bool inner = true;
  bool his = true;
  bool tv = true;
  bool smooth = true;
  bool negate_inner = false;

  bool get(LossTerm term) const;
  bool& get(LossTerm term);
  bool operator==(const LossToggles&) const = default;
};

template <typename S>
struct LossBreakdown {
  Var<S> total;
  std::vector<std::pair<LossTerm, double>> terms;  // unweighted values of enabled terms
};

template <typename S>
LossBreakdown<S> loss_total(const Var<S>& pred, const Var<S>& target, const Var<S>& low, const LossWeights& w,
                            const LossToggles& toggles, const PerceptualBank<S>& bank);

}  // namespace dpec
