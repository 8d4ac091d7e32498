#include "dpec/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dpec/params.hpp"

namespace dpec {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(g.constant(t));
  return f(g, leaves).value()[0];
}

}  // namespace

GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, int coords,
                          std::uint64_t seed, double step, double floor) {
  Graph<double> g;
  std::vector<Var<double>> leaves;
  for (const auto& t : inputs) leaves.push_back(g.parameter(t));
  const Var<double> root = f(g, leaves);
  g.backward(root);
  std::vector<Tensor<double>> analytic;
  Index total = 0;
  for (const auto& v : leaves) {
    analytic.push_back(g.grad(v));
    total += v.size();
  }

  std::mt19937_64 rng(mix_seed(seed));
  GradcheckResult res;
  std::vector<Tensor<double>> probe = inputs;
  for (int k = 0; k < coords; ++k) {
    Index flat = static_cast<Index>(rng() % static_cast<std::uint64_t>(total));
    std::size_t which = 0;
    while (flat >= probe[which].size()) flat -= probe[which++].size();
    const double orig = probe[which][flat];
    probe[which][flat] = orig + step;
    const double up = evaluate(f, probe);
    probe[which][flat] = orig - step;
    const double down = evaluate(f, probe);
    probe[which][flat] = orig;
    const double numeric = (up - down) / (2 * step);
    const double a = analytic[which][flat];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    res.max_rel_error = std::max(res.max_rel_error, rel);
    res.checked += 1;
  }
  return res;
}

}  // namespace dpec
