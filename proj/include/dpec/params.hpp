#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dpec/graph.hpp"

namespace dpec {

/// splitmix64 finaliser; used to derive independent per-purpose RNG seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

enum class Init {
  zeros,
  ones,
  fan_in_uniform,  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  he_normal,       // N(0, 2/fan_in)
  ssm_a_log,       // log(1..d_state) along the last axis
  ssm_dt_bias,     // inverse softplus of a log-uniform step in [1e-3, 1e-1]
};

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  Index fan_in = 1;
};

Index count_scalars(const std::vector<ParamSpec>& specs);

/// Named tensors, iterated in name order.
template <typename S>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<S>>;

  void set(const std::string& name, Tensor<S> t) { tensors_.insert_or_assign(name, std::move(t)); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor<S>& at(const std::string& name) const;
  Tensor<S>& at(const std::string& name);
  std::size_t size() const { return tensors_.size(); }
  Index scalar_count() const;

  typename Map::const_iterator begin() const { return tensors_.begin(); }
  typename Map::const_iterator end() const { return tensors_.end(); }
  typename Map::iterator begin() { return tensors_.begin(); }
  typename Map::iterator end() { return tensors_.end(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : tensors_) out.set(name, t.template cast<U>());
    return out;
  }

  bool operator==(const ParamSet& other) const { return tensors_ == other.tensors_; }

 private:
  Map tensors_;
};

template <typename S>
ParamSet<S> initialize(const std::vector<ParamSpec>& specs, std::uint64_t seed);

/// Binds a ParamSet into a Graph as leaves, once per name.
template <typename S>
class Binder {
 public:
  Binder(Graph<S>& graph, const ParamSet<S>& params, bool trainable)
      : graph_(&graph), params_(&params), trainable_(trainable) {}

  Var<S> operator()(const std::string& name);
  /// Uses `v` for `name` instead of creating a leaf from the ParamSet.
  void adopt(const std::string& name, Var<S> v) { bound_.insert_or_assign(name, std::move(v)); }
  Graph<S>& graph() const { return *graph_; }
  bool trainable() const { return trainable_; }
  const std::map<std::string, Var<S>>& bound() const { return bound_; }

 private:
  Graph<S>* graph_;
  const ParamSet<S>* params_;
  bool trainable_;
  std::map<std::string, Var<S>> bound_;
};

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template class Binder<float>;
extern template class Binder<double>;

}  // namespace dpec
