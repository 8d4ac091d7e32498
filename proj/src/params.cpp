#include "dpec/params.hpp"

#include <cmath>
#include <random>

namespace dpec {

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(mix_seed(mix_seed(base) ^ a) ^ b) ^ c);
}

Index count_scalars(const std::vector<ParamSpec>& specs) {
  Index n = 0;
  for (const auto& s : specs) n += numel(s.shape);
  return n;
}

template <typename S>
const Tensor<S>& ParamSet<S>::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::ShapeMismatch, "missing parameter '" + name + "'");
  return it->second;
}

template <typename S>
Tensor<S>& ParamSet<S>::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::ShapeMismatch, "missing parameter '" + name + "'");
  return it->second;
}

template <typename S>
Index ParamSet<S>::scalar_count() const {
  Index n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

template <typename S>
ParamSet<S> initialize(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  ParamSet<S> out;
  for (const auto& spec : specs) {
    // Each tensor gets its own stream so adding a parameter does not shift the others.
    std::mt19937_64 rng(derive_seed(seed, fnv1a64(spec.name)));
    Tensor<S> t(spec.shape);
    const double fan_in = static_cast<double>(std::max<Index>(spec.fan_in, 1));
    switch (spec.init) {
      case Init::zeros:
        break;
      case Init::ones:
        t.array().setConstant(S(1));
        break;
      case Init::fan_in_uniform: {
        const double bound = 1.0 / std::sqrt(fan_in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(dist(rng));
        break;
      }
      case Init::he_normal: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(dist(rng));
        break;
      }
      case Init::ssm_a_log: {
        const Index n = spec.shape.back();
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(std::log(static_cast<double>(i % n + 1)));
        break;
      }
      case Init::ssm_dt_bias: {
        std::uniform_real_distribution<double> dist(std::log(1e-3), std::log(1e-1));
        for (Index i = 0; i < t.size(); ++i) {
          const double dt = std::exp(dist(rng));
          t[i] = static_cast<S>(dt + std::log(-std::expm1(-dt)));
        }
        break;
      }
    }
    out.set(spec.name, std::move(t));
  }
  return out;
}

template <typename S>
Var<S> Binder<S>::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var<S> v = graph_->leaf(params_->at(name), trainable_);
  bound_.emplace(name, v);
  return v;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Binder<float>;
template class Binder<double>;
template ParamSet<float> initialize(const std::vector<ParamSpec>&, std::uint64_t);
template ParamSet<double> initialize(const std::vector<ParamSpec>&, std::uint64_t);

}  // namespace dpec
