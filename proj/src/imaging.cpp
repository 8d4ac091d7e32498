#include "dpec/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dpec/losses.hpp"

namespace dpec {

ImageRGB8::ImageRGB8(Index w, Index h) : width(w), height(h) {
  if (w < 1 || h < 1) throw Error(ErrorCode::ShapeMismatch, "image dimensions must be >= 1");
  pixels.assign(static_cast<std::size_t>(3 * w * h), 0);
}

ImageRGB8 load_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::IoError, "cannot read PNG '" + path.string() + "': " + msg);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw Error(ErrorCode::UnsupportedFormat, "16-bit PNG not supported: " + path.string());
  }
  ImageRGB8 out(static_cast<Index>(image.width), static_cast<Index>(image.height));
  // Decoding to RGB would composite over a background; read RGBA and discard alpha instead.
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::IoError, "cannot decode PNG '" + path.string() + "': " + msg);
  }
  for (std::size_t p = 0; p < out.pixels.size() / 3; ++p) {
    for (std::size_t c = 0; c < 3; ++c) out.pixels[3 * p + c] = rgba[4 * p + c];
  }
  return out;
}

void save_png(const std::filesystem::path& path, const ImageRGB8& img) {
  if (img.width < 1 || img.height < 1 || img.pixels.size() != static_cast<std::size_t>(3 * img.width * img.height)) {
    throw Error(ErrorCode::ShapeMismatch, "malformed image buffer");
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::IoError, "cannot write PNG '" + path.string() + "': " + msg);
  }
}

template <typename S>
Tensor<S> to_tensor(const ImageRGB8& img) {
  const Index h = img.height, w = img.width;
  Tensor<S> t(Shape{1, 3, h, w});
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) t[(c * h + y) * w + x] = static_cast<S>(img.at(x, y, c)) / S(255);
    }
  }
  return t;
}

template <typename S>
ImageRGB8 from_tensor(const Tensor<S>& t) {
  const bool batched = t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 3;
  if (!batched && !(t.rank() == 3 && t.dim(0) == 3)) {
    throw Error(ErrorCode::ShapeMismatch, "from_tensor expects [1,3,H,W] or [3,H,W], got " + shape_str(t.shape()));
  }
  const Index h = t.dim(-2), w = t.dim(-1);
  ImageRGB8 img(w, h);
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double v = std::clamp(static_cast<double>(t[(c * h + y) * w + x]), 0.0, 1.0);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
      }
    }
  }
  return img;
}

template <typename S>
double psnr(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "psnr of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  double sq = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

template <typename S>
double ssim_index(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, "ssim_index of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Graph<S> g;
  return 1.0 - static_cast<double>(loss_ssim(g.constant(a), g.constant(b)).value()[0]);
}

#define DPEC_INSTANTIATE_IMAGING(S)                       \
  template Tensor<S> to_tensor(const ImageRGB8&);         \
  template ImageRGB8 from_tensor(const Tensor<S>&);       \
  template double psnr(const Tensor<S>&, const Tensor<S>&); \
  template double ssim_index(const Tensor<S>&, const Tensor<S>&);

DPEC_INSTANTIATE_IMAGING(float)
DPEC_INSTANTIATE_IMAGING(double)

}  // namespace dpec
