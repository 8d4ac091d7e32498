#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpec/imaging.hpp"

namespace dpec {

inline constexpr double kSynthGainMin = 0.05;
inline constexpr double kSynthGainMax = 0.3;
inline constexpr double kSynthNoiseStd = 0.02;

/// One generated pair in [0,1], [1,3,H,W] each, plus the [1,1,H,W] gain map.
struct SynthPair {
  Tensor<double> ref;
  Tensor<double> low;
  Tensor<double> gain;
};

/// Reference: a smooth background with seeded rectangles and discs, colours in [0.1, 0.95].
/// Low: clamp(gain * (ref + noise)), noise ~ N(0, 0.02), gain a smooth field in [0.05, 0.3].
SynthPair synth_pair(std::uint64_t seed, std::int64_t index, Index height = 64, Index width = 64);

/// Writes <out>/low/<name>.png and <out>/ref/<name>.png; returns the names.
std::vector<std::string> write_synth_set(const std::filesystem::path& out, int count, std::uint64_t seed,
                                         Index height = 64, Index width = 64);

}  // namespace dpec
