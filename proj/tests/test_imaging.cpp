#include <doctest.h>
#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "dpec/imaging.hpp"
#include "dpec/losses.hpp"
#include "support/oracle.hpp"

using namespace dpec;
using namespace dpec::test;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const fs::path dir = fs::temp_directory_path() / ("dpec_test_imaging_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

// Raw libpng writer for formats save_png never produces. `rows` holds packed
// big-endian samples for the given colour type and bit depth.
void write_raw_png(const fs::path& path, int w, int h, int color_type, int bit_depth,
                   const std::vector<std::uint8_t>& rows, const std::vector<png_color>& palette = {}) {
  FILE* f = std::fopen(path.c_str(), "wb");
  REQUIRE(f != nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (!palette.empty()) png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
  png_write_info(png, info);
  const std::size_t stride = rows.size() / static_cast<std::size_t>(h);
  for (int y = 0; y < h; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * stride);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

ImageRGB8 random_image(Index w, Index h, std::mt19937_64& rng) {
  ImageRGB8 img(w, h);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() & 0xFF);
  return img;
}

double psnr_oracle(const TD& a, const TD& b) {
  double se = 0;
  for (Index i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = se / static_cast<double>(a.size());
  return mse == 0 ? 99.0 : std::min(99.0, 10 * std::log10(1 / mse));
}

}  // namespace

TEST_CASE("png save and load round trip") {
  const fs::path dir = scratch_dir();
  std::mt19937_64 rng(41);
  for (auto [w, h] : {std::pair<Index, Index>{1, 1}, {7, 3}, {32, 17}}) {
    const ImageRGB8 img = random_image(w, h, rng);
    save_png(dir / "rt.png", img);
    CHECK(load_png(dir / "rt.png") == img);
  }
  ImageRGB8 red(1, 1);
  red.at(0, 0, 0) = 255;
  save_png(dir / "red.png", red);
  const ImageRGB8 back = load_png(dir / "red.png");
  CHECK(back.width == 1);
  CHECK(back.height == 1);
  CHECK(back.at(0, 0, 0) == 255);
  CHECK(back.at(0, 0, 1) == 0);
  CHECK(back.at(0, 0, 2) == 0);
  fs::remove_all(dir);
}

TEST_CASE("png formats: gray, rgba, palette and 16-bit") {
  const fs::path dir = scratch_dir();
  write_raw_png(dir / "gray.png", 3, 2, PNG_COLOR_TYPE_GRAY, 8, {0, 100, 255, 7, 8, 9});
  const ImageRGB8 gray = load_png(dir / "gray.png");
  REQUIRE(gray.width == 3);
  REQUIRE(gray.height == 2);
  for (Index y = 0; y < 2; ++y) {
    for (Index x = 0; x < 3; ++x) {
      CHECK(gray.at(x, y, 0) == gray.at(x, y, 1));
      CHECK(gray.at(x, y, 1) == gray.at(x, y, 2));
    }
  }
  CHECK(gray.at(1, 0, 0) == 100);
  CHECK(gray.at(2, 1, 2) == 9);

  write_raw_png(dir / "rgba.png", 2, 1, PNG_COLOR_TYPE_RGB_ALPHA, 8, {10, 20, 30, 0, 40, 50, 60, 255});
  const ImageRGB8 rgba = load_png(dir / "rgba.png");
  CHECK(rgba.pixels == std::vector<std::uint8_t>{10, 20, 30, 40, 50, 60});

  write_raw_png(dir / "pal.png", 2, 1, PNG_COLOR_TYPE_PALETTE, 8, {1, 0}, {{1, 2, 3}, {200, 100, 50}});
  CHECK(load_png(dir / "pal.png").pixels == std::vector<std::uint8_t>{200, 100, 50, 1, 2, 3});

  write_raw_png(dir / "deep.png", 1, 1, PNG_COLOR_TYPE_RGB, 16, {0, 1, 0, 2, 0, 3});
  CHECK(raised([&] { load_png(dir / "deep.png"); }) == ErrorCode::UnsupportedFormat);

  CHECK(raised([&] { load_png(dir / "missing.png"); }) == ErrorCode::IoError);
  {
    std::FILE* f = std::fopen((dir / "junk.png").c_str(), "wb");
    std::fputs("not a png at all", f);
    std::fclose(f);
  }
  CHECK(raised([&] { load_png(dir / "junk.png"); }).has_value());
  CHECK(raised([&] { save_png(dir / "no" / "such" / "dir.png", ImageRGB8(1, 1)); }) == ErrorCode::IoError);
  fs::remove_all(dir);
}

TEST_CASE("tensor conversion scale, bound and round trip") {
  ImageRGB8 img(2, 1);
  img.at(0, 0, 0) = 255;
  img.at(1, 0, 2) = 51;
  const TD t = to_tensor<double>(img);
  REQUIRE(t.shape() == Shape{1, 3, 1, 2});
  CHECK(t.at({0, 0, 0, 0}) == 1.0);
  CHECK(t.at({0, 1, 0, 0}) == 0.0);
  CHECK(t.at({0, 2, 0, 1}) == doctest::Approx(0.2).epsilon(1e-15));

  std::mt19937_64 rng(42);
  const ImageRGB8 r = random_image(9, 5, rng);
  CHECK(from_tensor(to_tensor<double>(r)) == r);
  CHECK(from_tensor(to_tensor<float>(r)) == r);

  // Arbitrary values quantise within half a level.
  const TD x = random_tensor({1, 3, 6, 4}, 0, 1, rng);
  const TD q = to_tensor<double>(from_tensor(x));
  CHECK(max_abs_diff(x, q) <= 1.0 / 510 + 1e-15);

  TD out_of_range({3, 1, 2}, {-0.5, 1.5, 0.5, 0.5, 0.0, 1.0});
  const ImageRGB8 c = from_tensor(out_of_range);
  CHECK(c.at(0, 0, 0) == 0);
  CHECK(c.at(1, 0, 0) == 255);
  // 0.5 * 255 = 127.5 rounds up.
  CHECK(c.at(0, 0, 1) == 128);
}

TEST_CASE("psnr cap, uniform error and loop oracle") {
  std::mt19937_64 rng(43);
  const TD a = random_tensor({1, 3, 8, 8}, 0.2, 0.8, rng);
  CHECK(psnr(a, a) == 99.0);
  TD b(a.shape());
  for (Index i = 0; i < a.size(); ++i) b[i] = a[i] + (i % 2 == 0 ? 0.1 : -0.1);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
  for (int trial = 0; trial < 10; ++trial) {
    const TD x = random_tensor({1, 3, 7, 5}, 0, 1, rng), y = random_tensor({1, 3, 7, 5}, 0, 1, rng);
    CHECK(psnr(x, y) == doctest::Approx(psnr_oracle(x, y)).epsilon(1e-12));
    CHECK(psnr(x, y) == psnr(y, x));
  }
  CHECK(raised([&] { psnr(a, TD({1, 3, 8, 7})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("ssim index identity, loss relation and single window") {
  std::mt19937_64 rng(44);
  const TD a = random_tensor({1, 3, 16, 16}, 0, 1, rng), b = random_tensor({1, 3, 16, 16}, 0, 1, rng);
  CHECK(ssim_index(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  Graph<double> g;
  const double loss = loss_ssim(g.constant(a), g.constant(b)).value()[0];
  CHECK(ssim_index(a, b) == 1 - loss);

  // One 11x11 window per channel, Gaussian sigma 1.5, C1 = 1e-4, C2 = 9e-4.
  const TD x = random_tensor({1, 3, 11, 11}, 0, 1, rng);
  TD y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = 0.6 * x[i] + 0.3 + 0.05 * std::sin(static_cast<double>(i));
  double wsum = 0, w[11];
  for (int i = 0; i < 11; ++i) wsum += (w[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5));
  double expected = 0;
  for (Index c = 0; c < 3; ++c) {
    double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
    for (int i = 0; i < 11; ++i) {
      for (int j = 0; j < 11; ++j) {
        const double k = w[i] * w[j] / (wsum * wsum);
        const double p = x.at({0, c, i, j}), q = y.at({0, c, i, j});
        mx += k * p;
        my += k * q;
        xx += k * p * p;
        yy += k * q * q;
        xy += k * p * q;
      }
    }
    const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
    expected += (2 * mx * my + 1e-4) * (2 * cov + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4)) / 3;
  }
  CHECK(ssim_index(x, y) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(raised([&] { ssim_index(a, TD({1, 3, 16, 15})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("metrics are symmetric and invariant to a shared horizontal flip") {
  std::mt19937_64 rng(45);
  auto hflip = [](const TD& t) {
    TD out(t.shape());
    const Index h = t.dim(2), w = t.dim(3);
    for (Index c = 0; c < t.dim(1); ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) out.at({0, c, i, j}) = t.at({0, c, i, w - 1 - j});
    return out;
  };
  for (int trial = 0; trial < 5; ++trial) {
    const TD a = random_tensor({1, 3, 14, 13}, 0, 1, rng), b = random_tensor({1, 3, 14, 13}, 0, 1, rng);
    CHECK(psnr(a, b) == psnr(b, a));
    CHECK(ssim_index(a, b) == doctest::Approx(ssim_index(b, a)).epsilon(1e-14));
    CHECK(psnr(hflip(a), hflip(b)) == doctest::Approx(psnr(a, b)).epsilon(1e-14));
    CHECK(ssim_index(hflip(a), hflip(b)) == doctest::Approx(ssim_index(a, b)).epsilon(1e-12));
  }
}
