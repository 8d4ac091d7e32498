#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dpec/dpec_net.hpp"
#include "dpec/losses.hpp"

namespace dpec {

struct TrainConfig {
  int stage = 1;
  int epochs = 600;
  std::int64_t max_steps = 0;  // 0: no cap beyond epochs
  std::optional<double> lr_start;  // unset: stage default
  std::optional<double> lr_min;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1;
  Index crop_size = 64;
  std::uint64_t seed = 42;
  double clip_norm = 1.0;  // <= 0 disables clipping
  bool flip = true;
  std::int64_t val_every = 0;  // 0: no validation
  LossWeights weights;
  LossToggles toggles;

  double lr_start_value() const { return lr_start.value_or(stage == 1 ? 5e-4 : 2e-3); }
  double lr_min_value() const { return lr_min.value_or(stage == 1 ? 5e-5 : 2e-4); }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

template <typename S>
struct AdamState {
  ParamSet<S> m;
  ParamSet<S> v;
  std::int64_t step = 0;
};

/// One Adam update with bias correction. Parameters absent from `grads` are left alone.
template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads, AdamState<S>& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_min);

/// Scales every gradient by min(1, max_norm / global_norm); returns the norm before clipping.
template <typename S> double clip_global_norm(ParamSet<S>& grads, double max_norm);

template <typename S>
struct ImagePair {
  std::string name;
  Tensor<S> low;  // [1,3,H,W]
  Tensor<S> ref;
};

/// Flips the last (horizontal) or second-to-last (vertical) axis.
template <typename S> Tensor<S> flip_tensor(const Tensor<S>& t, bool horizontal, bool vertical);

/// Applies one horizontal and one vertical coin flip, shared by both images.
/// Each coin is the low bit of one draw from `rng`.
template <typename S, typename Rng>
std::pair<Tensor<S>, Tensor<S>> augment_flip(const std::pair<Tensor<S>, Tensor<S>>& pair, Rng& rng) {
  const bool horizontal = (rng() & 1U) != 0;
  const bool vertical = (rng() & 1U) != 0;
  return {flip_tensor(pair.first, horizontal, vertical), flip_tensor(pair.second, horizontal, vertical)};
}

/// Same random size x size window from both images (whole image when smaller).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> random_crop(const std::pair<Tensor<S>, Tensor<S>>& pair, Index size,
                                            std::mt19937_64& rng);

template <typename S>
struct TrainState {
  int stage = 1;
  std::int64_t step = 0;
  ParamSet<S> bee;
  ParamSet<S> dn;
  AdamState<S> adam;  // moments of the parameters trained in `stage`
};

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0;
  double total = 0;
  std::vector<std::pair<LossTerm, double>> terms;
  std::optional<double> val_total;

  /// "step total term:value ..." with shortest round-trip formatting.
  std::string log_line() const;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called at every epoch boundary and after the last step.
  std::function<void()> on_checkpoint;
};

std::int64_t planned_steps(const TrainConfig& cfg, std::size_t dataset_size);

/// Runs (or resumes, from state.step) one training stage. Stage 2 keeps the BEE
/// frozen and requires state.stage >= 1 with a trained BEE (MissingStage1Checkpoint
/// when state.bee is empty). Throws NonFiniteLoss on a NaN/Inf loss before updating.
template <typename S>
std::vector<StepRecord> train_stage(const std::vector<ImagePair<S>>& data, const std::vector<ImagePair<S>>& val,
                                    const TrainConfig& cfg, const ModelConfig& model, TrainState<S>& state,
                                    const TrainHooks& hooks = {});

/// Training prediction (unclamped) for a batch.
template <typename S>
Var<S> training_prediction(const Var<S>& low, Binder<S>& bee, Binder<S>* dn, const ModelConfig& model, int stage);

}  // namespace dpec
