#include "dpec/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dpec/params.hpp"

namespace dpec {

SynthPair synth_pair(std::uint64_t seed, std::int64_t index, Index height, Index width) {
  if (height < 1 || width < 1) throw Error(ErrorCode::ShapeMismatch, "synthetic image size must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, fnv1a64("synth"), static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> colour(0.1, 0.95);
  const Index h = height, w = width, hw = h * w;
  SynthPair out{Tensor<double>(Shape{1, 3, h, w}), Tensor<double>(Shape{1, 3, h, w}), Tensor<double>(Shape{1, 1, h, w})};

  std::array<double, 3> top{}, bottom{};
  for (int c = 0; c < 3; ++c) {
    top[static_cast<std::size_t>(c)] = colour(rng);
    bottom[static_cast<std::size_t>(c)] = colour(rng);
  }
  for (Index y = 0; y < h; ++y) {
    const double t = h > 1 ? static_cast<double>(y) / static_cast<double>(h - 1) : 0.0;
    for (Index c = 0; c < 3; ++c) {
      const double v = (1 - t) * top[static_cast<std::size_t>(c)] + t * bottom[static_cast<std::size_t>(c)];
      for (Index x = 0; x < w; ++x) out.ref[c * hw + y * w + x] = v;
    }
  }

  const int shapes = 3 + static_cast<int>(rng() % 4);
  for (int s = 0; s < shapes; ++s) {
    const bool disc = (rng() & 1U) != 0;
    const double cy = unit(rng) * static_cast<double>(h), cx = unit(rng) * static_cast<double>(w);
    const double ry = (0.1 + 0.25 * unit(rng)) * static_cast<double>(h);
    const double rx = (0.1 + 0.25 * unit(rng)) * static_cast<double>(w);
    const std::array<double, 3> col{colour(rng), colour(rng), colour(rng)};
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry, dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        const bool hit = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!hit) continue;
        for (Index c = 0; c < 3; ++c) out.ref[c * hw + y * w + x] = col[static_cast<std::size_t>(c)];
      }
    }
  }

  // Smooth gain field: a tilted ramp modulated by one low-frequency cosine, mapped onto [min, max].
  const double angle = unit(rng) * 2.0 * std::numbers::pi;
  const double fy = 0.5 + unit(rng), fx = 0.5 + unit(rng), phase = unit(rng) * 2.0 * std::numbers::pi;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const double u = static_cast<double>(y) / static_cast<double>(std::max<Index>(h - 1, 1));
      const double v = static_cast<double>(x) / static_cast<double>(std::max<Index>(w - 1, 1));
      const double ramp = 0.5 + 0.5 * (std::cos(angle) * (u - 0.5) + std::sin(angle) * (v - 0.5));
      const double wave = 0.5 + 0.5 * std::cos(std::numbers::pi * (fy * u + fx * v) + phase);
      const double t = std::clamp(0.6 * ramp + 0.4 * wave, 0.0, 1.0);
      out.gain[y * w + x] = kSynthGainMin + (kSynthGainMax - kSynthGainMin) * t;
    }
  }

  std::normal_distribution<double> noise(0.0, kSynthNoiseStd);
  for (Index c = 0; c < 3; ++c) {
    for (Index p = 0; p < hw; ++p) {
      const Index i = c * hw + p;
      out.low[i] = std::clamp(out.gain[p] * (out.ref[i] + noise(rng)), 0.0, 1.0);
    }
  }
  return out;
}

std::vector<std::string> write_synth_set(const std::filesystem::path& out, int count, std::uint64_t seed,
                                         Index height, Index width) {
  if (count < 1) throw Error(ErrorCode::ConfigError, "synth count must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out / "low", ec);
  std::filesystem::create_directories(out / "ref", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create '" + out.string() + "': " + ec.message());
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%03d.png", i);
    const SynthPair pair = synth_pair(seed, i, height, width);
    save_png(out / "low" / name, from_tensor(pair.low));
    save_png(out / "ref" / name, from_tensor(pair.ref));
    names.emplace_back(name);
  }
  return names;
}

}  // namespace dpec
