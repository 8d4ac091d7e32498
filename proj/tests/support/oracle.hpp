#pragma once

// Test-side reference helpers. Nothing here calls the library's gradcheck, so the
// two finite-difference implementations check each other.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "dpec/graph.hpp"
#include "dpec/ops.hpp"

namespace dpec::test {

using TD = Tensor<double>;
using VD = Var<double>;
using TF = Tensor<float>;

inline TD random_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  TD t(std::move(shape));
  for (double& v : t.values()) v = d(rng);
  return t;
}

/// Values with |v| in [lo, hi] and a random sign: keeps probes away from kinks at 0.
inline TD signed_away_from_zero(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  TD t = random_tensor(std::move(shape), lo, hi, rng);
  for (double& v : t.values()) {
    if (rng() & 1U) v = -v;
  }
  return t;
}

/// sum(y * W) with W fixed by `seed`: every output element reaches the root.
inline VD weighted_sum(const VD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.graph().constant(random_tensor(y.shape(), -1, 1, rng))));
}

using Builder = std::function<VD(Graph<double>&, const std::vector<VD>&)>;

inline double eval_scalar(const Builder& f, const std::vector<TD>& inputs) {
  Graph<double> g;
  std::vector<VD> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  return f(g, vars).value()[0];
}

struct FdReport {
  double max_rel = 0;
  int checked = 0;
};

/// Central differences at `per_input` random coordinates of every input (all
/// coordinates when the input is smaller). Error is |a - n| / max(|a|, |n|, floor).
inline FdReport fd_check(const Builder& f, std::vector<TD> inputs, int per_input, std::uint64_t seed,
                         double h = 1e-5, double floor = 1e-5) {
  Graph<double> g;
  std::vector<VD> vars;
  for (const auto& t : inputs) vars.push_back(g.parameter(t));
  g.backward(f(g, vars));

  std::mt19937_64 rng(seed);
  FdReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const TD analytic = g.grad(vars[i]);
    std::vector<Index> coords;
    if (inputs[i].size() <= per_input) {
      for (Index k = 0; k < inputs[i].size(); ++k) coords.push_back(k);
    } else {
      for (int k = 0; k < per_input; ++k) coords.push_back(static_cast<Index>(rng() % inputs[i].size()));
    }
    for (Index k : coords) {
      const double x0 = inputs[i][k];
      inputs[i][k] = x0 + h;
      const double fp = eval_scalar(f, inputs);
      inputs[i][k] = x0 - h;
      const double fm = eval_scalar(f, inputs);
      inputs[i][k] = x0;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[k];
      rep.max_rel = std::max(rep.max_rel, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
      rep.checked += 1;
    }
  }
  return rep;
}

inline double max_abs_diff(const TD& a, const TD& b) {
  return (a.array() - b.array()).abs().maxCoeff();
}

/// Code of the dpec::Error thrown by `f`, or nullopt when it returns normally.
template <typename F>
std::optional<ErrorCode> raised(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace dpec::test
