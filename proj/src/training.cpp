#include "dpec/training.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

namespace dpec {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& items) {
  Shape shape = items.front().shape();
  const Index each = items.front().size();
  shape[0] = 0;
  for (const auto& t : items) {
    if (t.size() != each || t.shape()[0] != 1) throw Error(ErrorCode::ShapeMismatch, "cannot batch images of different sizes");
    shape[0] += 1;
  }
  Tensor<S> out(shape);
  for (std::size_t i = 0; i < items.size(); ++i) out.array().segment(static_cast<Index>(i) * each, each) = items[i].array();
  return out;
}

// Fisher-Yates driven directly by the engine output, so the order does not depend
// on the standard library's distribution implementations.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, fnv1a64("order"), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::ConfigError, msg); };
  if (stage != 1 && stage != 2) fail("train.stage must be 1 or 2");
  if (epochs < 1) fail("train.epochs must be >= 1");
  if (max_steps < 0) fail("train.max_steps must be >= 0");
  if (lr_min_value() > lr_start_value()) fail("train.lr_min must not exceed train.lr_start");
  if (lr_min_value() < 0) fail("learning rates must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) fail("train.adam_eps must be > 0");
  if (batch_size < 1) fail("train.batch_size must be >= 1");
  if (crop_size < 1) fail("train.crop_size must be >= 1");
  if (val_every < 0) fail("train.val_every must be >= 0");
  for (LossTerm t : kLossTerms) {
    if (weights.get(t) < 0) fail(std::string("loss weight ") + to_string(t) + " must be >= 0");
  }
}

template <typename S>
void adam_step(ParamSet<S>& params, const ParamSet<S>& grads, AdamState<S>& state, double lr, double beta1,
               double beta2, double eps) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const S c1 = static_cast<S>(1.0 - std::pow(beta1, t));
  const S c2 = static_cast<S>(1.0 - std::pow(beta2, t));
  const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2), e = static_cast<S>(eps), a = static_cast<S>(lr);
  for (const auto& [name, g] : grads) {
    Tensor<S>& p = params.at(name);
    if (p.shape() != g.shape()) {
      throw Error(ErrorCode::ShapeMismatch, "gradient " + shape_str(g.shape()) + " for parameter '" + name + "' " +
                                                shape_str(p.shape()));
    }
    if (!state.m.contains(name)) {
      state.m.set(name, Tensor<S>(p.shape()));
      state.v.set(name, Tensor<S>(p.shape()));
    }
    auto& m = state.m.at(name).array();
    auto& v = state.v.at(name).array();
    m = b1 * m + (S(1) - b1) * g.array();
    v = b2 * v + (S(1) - b2) * g.array().square();
    p.array() -= a * (m / c1) / ((v / c2).sqrt() + e);
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_start, double lr_min) {
  if (total_steps <= 0) return lr_start;
  const double frac = static_cast<double>(std::clamp<std::int64_t>(step, 0, total_steps)) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_start - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename S>
double clip_global_norm(ParamSet<S>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads) sq += g.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& [name, g] : grads) g.array() *= scale;
  }
  return norm;
}

template <typename S>
Tensor<S> flip_tensor(const Tensor<S>& t, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return t;
  if (t.rank() < 2) throw Error(ErrorCode::ShapeMismatch, "flip of " + shape_str(t.shape()));
  const Index h = t.dim(-2), w = t.dim(-1), planes = t.size() / (h * w);
  Tensor<S> out(t.shape());
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < h; ++i) {
      const Index si = vertical ? h - 1 - i : i;
      for (Index j = 0; j < w; ++j) {
        out[(p * h + i) * w + j] = t[(p * h + si) * w + (horizontal ? w - 1 - j : j)];
      }
    }
  }
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> random_crop(const std::pair<Tensor<S>, Tensor<S>>& pair, Index size,
                                            std::mt19937_64& rng) {
  const Tensor<S>& a = pair.first;
  if (a.shape() != pair.second.shape() || a.rank() != 4) {
    throw Error(ErrorCode::ShapeMismatch, "random_crop of " + shape_str(a.shape()) + " and " +
                                              shape_str(pair.second.shape()));
  }
  const Index h = a.dim(2), w = a.dim(3);
  const Index ch = std::min(size, h), cw = std::min(size, w);
  const Index top = static_cast<Index>(rng() % static_cast<std::uint64_t>(h - ch + 1));
  const Index left = static_cast<Index>(rng() % static_cast<std::uint64_t>(w - cw + 1));
  if (ch == h && cw == w) return pair;
  auto crop = [&](const Tensor<S>& t) {
    Tensor<S> out(Shape{t.dim(0), t.dim(1), ch, cw});
    const Index planes = t.dim(0) * t.dim(1);
    for (Index p = 0; p < planes; ++p) {
      for (Index i = 0; i < ch; ++i) {
        for (Index j = 0; j < cw; ++j) out[(p * ch + i) * cw + j] = t[(p * h + top + i) * w + left + j];
      }
    }
    return out;
  };
  return {crop(pair.first), crop(pair.second)};
}

std::string StepRecord::log_line() const {
  std::string line = std::to_string(step) + " " + format_double(total);
  for (const auto& [term, value] : terms) line += std::string(" ") + to_string(term) + ":" + format_double(value);
  if (val_total) line += " val:" + format_double(*val_total);
  return line;
}

std::int64_t planned_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  const auto per_epoch = static_cast<std::int64_t>((dataset_size + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                   static_cast<std::size_t>(cfg.batch_size));
  const std::int64_t total = per_epoch * cfg.epochs;
  return cfg.max_steps > 0 ? std::min(total, cfg.max_steps) : total;
}

template <typename S>
Var<S> training_prediction(const Var<S>& low, Binder<S>& bee, Binder<S>* dn, const ModelConfig& model, int stage) {
  const Var<S> error = bee_forward(low, bee, model.bee);
  if (stage == 1) return fuse(low, error, model.mode);
  if (dn == nullptr) throw Error(ErrorCode::MissingDenoiser, "stage 2 needs denoiser parameters");
  return fuse(denoise_forward(low, *dn, model.denoise), error, model.mode);
}

namespace {

template <typename S>
double validation_loss(const std::vector<ImagePair<S>>& val, const TrainConfig& cfg, const ModelConfig& model,
                       TrainState<S>& state, const PerceptualBank<S>& bank) {
  double total = 0;
  for (const auto& pair : val) {
    Graph<S> g;
    Binder<S> bee(g, state.bee, false);
    Binder<S> dn(g, state.dn, false);
    const Var<S> low = g.constant(pair.low);
    const Var<S> pred = training_prediction(low, bee, cfg.stage == 2 ? &dn : nullptr, model, cfg.stage);
    total += static_cast<double>(
        loss_total(pred, g.constant(pair.ref), low, cfg.weights, cfg.toggles, bank).total.value()[0]);
  }
  return total / static_cast<double>(val.size());
}

}  // namespace

template <typename S>
std::vector<StepRecord> train_stage(const std::vector<ImagePair<S>>& data, const std::vector<ImagePair<S>>& val,
                                    const TrainConfig& cfg, const ModelConfig& model, TrainState<S>& state,
                                    const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::ConfigError, "empty training set");
  for (const auto& p : data) {
    if (p.low.shape() != p.ref.shape()) throw Error(ErrorCode::PairingError, "pair '" + p.name + "' differs in size");
  }
  if (cfg.stage == 2) {
    if (state.bee.size() == 0) throw Error(ErrorCode::MissingStage1Checkpoint, "stage 2 needs a trained BEE");
    if (state.stage == 1) {
      state.stage = 2;
      state.step = 0;
      state.adam = {};
    }
    if (state.dn.size() == 0) {
      state.dn = initialize<S>(denoise_param_specs(model.denoise), derive_seed(cfg.seed, fnv1a64("dn")));
    }
  } else {
    if (state.stage == 2) throw Error(ErrorCode::ConfigError, "cannot resume stage 1 from a stage-2 checkpoint");
    if (state.bee.size() == 0) {
      state.bee = initialize<S>(bee_param_specs(model.bee), derive_seed(cfg.seed, fnv1a64("bee")));
    }
  }

  const int stage = cfg.stage;
  ParamSet<S>& trained = stage == 1 ? state.bee : state.dn;
  const std::int64_t total = planned_steps(cfg, data.size());
  const auto per_epoch = static_cast<std::int64_t>((data.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                   static_cast<std::size_t>(cfg.batch_size));
  const PerceptualBank<S> bank = PerceptualBank<S>::make();
  const double lr0 = cfg.lr_start_value(), lr1 = cfg.lr_min_value();
  std::vector<StepRecord> history;

  while (state.step < total) {
    const std::int64_t epoch = state.step / per_epoch, k = state.step % per_epoch;
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    std::vector<Tensor<S>> lows, refs;
    for (int j = 0; j < cfg.batch_size; ++j) {
      const auto& pair = data[order[static_cast<std::size_t>(k * cfg.batch_size + j) % data.size()]];
      std::mt19937_64 rng(derive_seed(cfg.seed, fnv1a64("augment"), static_cast<std::uint64_t>(state.step),
                                      static_cast<std::uint64_t>(j)));
      std::pair<Tensor<S>, Tensor<S>> sample{pair.low, pair.ref};
      if (cfg.flip) sample = augment_flip(sample, rng);
      sample = random_crop(sample, cfg.crop_size, rng);
      lows.push_back(std::move(sample.first));
      refs.push_back(std::move(sample.second));
    }

    Graph<S> g;
    Binder<S> bee(g, state.bee, stage == 1);
    Binder<S> dn(g, state.dn, stage == 2);
    const Var<S> low = g.constant(stack(lows));
    const Var<S> pred = training_prediction(low, bee, stage == 2 ? &dn : nullptr, model, stage);
    const LossBreakdown<S> loss = loss_total(pred, g.constant(stack(refs)), low, cfg.weights, cfg.toggles, bank);
    const double value = static_cast<double>(loss.total.value()[0]);
    if (!std::isfinite(value)) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(state.step));
    }
    g.backward(loss.total);

    ParamSet<S> grads;
    if (stage == 2) {
      for (const auto& [name, v] : bee.bound()) {
        if (v.requires_grad() || !g.grad(v).array().isZero(0)) {
          throw Error(ErrorCode::ConfigError, "BEE parameter '" + name + "' received a gradient in stage 2");
        }
      }
    }
    for (const auto& [name, v] : (stage == 1 ? bee : dn).bound()) grads.set(name, g.grad(v));
    clip_global_norm(grads, cfg.clip_norm);
    const double lr = cosine_lr(state.step, total, lr0, lr1);
    adam_step(trained, grads, state.adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    state.step += 1;

    StepRecord rec;
    rec.step = state.step;
    rec.lr = lr;
    rec.total = value;
    rec.terms = loss.terms;
    if (cfg.val_every > 0 && !val.empty() && state.step % cfg.val_every == 0) {
      rec.val_total = validation_loss(val, cfg, model, state, bank);
    }
    if (hooks.on_step) hooks.on_step(rec);
    history.push_back(std::move(rec));
    if ((state.step % per_epoch == 0 || state.step == total) && hooks.on_checkpoint) hooks.on_checkpoint();
  }
  return history;
}

#define DPEC_INSTANTIATE_TRAINING(S)                                                                           \
  template void adam_step(ParamSet<S>&, const ParamSet<S>&, AdamState<S>&, double, double, double, double);  \
  template double clip_global_norm(ParamSet<S>&, double);                                                      \
  template Tensor<S> flip_tensor(const Tensor<S>&, bool, bool);                                                \
  template std::pair<Tensor<S>, Tensor<S>> random_crop(const std::pair<Tensor<S>, Tensor<S>>&, Index,         \
                                                       std::mt19937_64&);                                      \
  template Var<S> training_prediction(const Var<S>&, Binder<S>&, Binder<S>*, const ModelConfig&, int);        \
  template std::vector<StepRecord> train_stage(const std::vector<ImagePair<S>>&,                              \
                                               const std::vector<ImagePair<S>>&, const TrainConfig&,           \
                                               const ModelConfig&, TrainState<S>&, const TrainHooks&);

DPEC_INSTANTIATE_TRAINING(float)
DPEC_INSTANTIATE_TRAINING(double)

}  // namespace dpec
