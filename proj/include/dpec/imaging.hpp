#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dpec/tensor.hpp"

namespace dpec {

/// Interleaved 8-bit RGB, row-major.
struct ImageRGB8 {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height

  ImageRGB8() = default;
  ImageRGB8(Index w, Index h);
  std::uint8_t& at(Index x, Index y, Index c) { return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  std::uint8_t at(Index x, Index y, Index c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  bool operator==(const ImageRGB8&) const = default;
};

/// Reads 8-bit RGB, RGBA (alpha dropped), gray and palette PNGs.
/// IoError on unreadable files, UnsupportedFormat on 16-bit samples.
ImageRGB8 load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const ImageRGB8& img);

/// [1,3,H,W] in [0,1].
template <typename S> Tensor<S> to_tensor(const ImageRGB8& img);
/// Accepts [1,3,H,W] or [3,H,W]; clamps to [0,1] and rounds half up.
template <typename S> ImageRGB8 from_tensor(const Tensor<S>& t);

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE), capped at kPsnrCap.
template <typename S> double psnr(const Tensor<S>& a, const Tensor<S>& b);
/// Mean windowed SSIM, per channel then averaged; equals 1 - loss_ssim.
template <typename S> double ssim_index(const Tensor<S>& a, const Tensor<S>& b);

}  // namespace dpec
