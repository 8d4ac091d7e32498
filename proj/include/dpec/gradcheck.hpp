#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dpec/graph.hpp"

namespace dpec {

/// Builds a scalar from leaves bound on the given graph.
using ScalarFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

struct GradcheckResult {
  double max_rel_error = 0;
  Index checked = 0;
};

/// Compares reverse-mode adjoints with central differences at `coords` random
/// coordinates spread over all inputs. Relative error is |a - n| / max(|a|, |n|, floor).
GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, int coords,
                          std::uint64_t seed, double step = 1e-5, double floor = 1e-5);

}  // namespace dpec
