#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dpec/config.hpp"

namespace dpec {

/// Binary layout, all integers little-endian:
///   "DPEC" | u32 version | u32 stage | u32 mode | u64 seed | u64 config_hash | u64 step
///   | u32 len + config text
///   | u32 count | count x (u32 len + name | u8 dtype | u32 rank | rank x u64 dim | payload)
///   | u64 FNV-1a of every preceding byte
/// dtype 1 = f32, 2 = f64. Tensor names are unique and stored in sorted order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
struct Checkpoint {
  int stage = 1;
  EnhanceMode mode = EnhanceMode::dpec;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  std::string config_text;
  ParamSet<S> tensors;

  bool operator==(const Checkpoint&) const = default;
};

template <typename S> std::string encode_checkpoint(const Checkpoint<S>& ckpt);
/// CheckpointError on bad magic, version, checksum, dtype or truncation.
template <typename S> Checkpoint<S> decode_checkpoint(const std::string& bytes);

/// Writes through a temporary file and a rename, so a failed write leaves the old file intact.
template <typename S> void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& ckpt);
template <typename S> Checkpoint<S> load_checkpoint(const std::filesystem::path& path);

/// Parameters under "bee/" and "dn/", Adam moments under "adam.m/" and "adam.v/".
template <typename S> Checkpoint<S> pack_state(const TrainState<S>& state, const RunConfig& cfg);
template <typename S> TrainState<S> unpack_state(const Checkpoint<S>& ckpt);
/// Model configuration embedded in the checkpoint.
template <typename S> RunConfig checkpoint_config(const Checkpoint<S>& ckpt);

}  // namespace dpec
