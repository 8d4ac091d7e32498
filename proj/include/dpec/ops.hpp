#pragma once

#include <vector>

#include "dpec/graph.hpp"

namespace dpec {

// Element-wise ops. Binary ops accept identical shapes or a single-element
// operand on either side; anything else is a ShapeMismatch.

enum class DivMode { lenient, strict };

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
/// Strict mode raises DivisionDomain when the denominator holds an exact zero.
template <typename S> Var<S> div(const Var<S>& a, const Var<S>& b, DivMode mode = DivMode::lenient);

template <typename S> Var<S> add(const Var<S>& a, S c);
template <typename S> Var<S> mul(const Var<S>& a, S c);
/// c - a
template <typename S> Var<S> rsub(S c, const Var<S>& a);

template <typename S> Var<S> neg(const Var<S>& a);
template <typename S> Var<S> exp(const Var<S>& a);
template <typename S> Var<S> log(const Var<S>& a);
/// a^p for a >= 0. The adjoint at a == 0 with p < 1 is taken as 0.
template <typename S> Var<S> pow(const Var<S>& a, S p);
template <typename S> Var<S> abs(const Var<S>& a);
template <typename S> Var<S> sqrt(const Var<S>& a);
template <typename S> Var<S> square(const Var<S>& a);
template <typename S> Var<S> silu(const Var<S>& a);
template <typename S> Var<S> sigmoid(const Var<S>& a);
template <typename S> Var<S> softplus(const Var<S>& a);
template <typename S> Var<S> relu(const Var<S>& a);
/// Passes the adjoint where lo <= a <= hi, zero elsewhere.
template <typename S> Var<S> clamp(const Var<S>& a, S lo, S hi);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }
template <typename S> Var<S> operator/(const Var<S>& a, const Var<S>& b) { return div(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a) { return neg(a); }
template <typename S> Var<S> operator+(const Var<S>& a, S c) { return add(a, c); }
template <typename S> Var<S> operator*(const Var<S>& a, S c) { return mul(a, c); }
template <typename S> Var<S> operator*(S c, const Var<S>& a) { return mul(a, c); }

/// [M,K] x [K,N] -> [M,N]
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);

// Reductions. Reduced axes are removed; reducing everything yields shape {1}.
// min/max route the adjoint to the first occurrence in row-major order.

enum class Reduce { sum, mean, min, max };

template <typename S> Var<S> reduce(Reduce op, const Var<S>& a, std::vector<Index> axes);
template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
template <typename S> Var<S> sum(const Var<S>& a, std::vector<Index> axes) {
  return reduce(Reduce::sum, a, std::move(axes));
}
template <typename S> Var<S> mean(const Var<S>& a, std::vector<Index> axes) {
  return reduce(Reduce::mean, a, std::move(axes));
}

// Layout ops.

template <typename S> Var<S> reshape(const Var<S>& a, Shape shape);
/// Output axis i is input axis perm[i].
template <typename S> Var<S> permute(const Var<S>& a, std::vector<Index> perm);
template <typename S> Var<S> concat(const std::vector<Var<S>>& parts, Index axis);
template <typename S> Var<S> slice(const Var<S>& a, Index axis, Index start, Index length);
template <typename S> Var<S> flip(const Var<S>& a, Index axis);
/// out[..., k, ...] = a[..., indices[k], ...] along `axis`; adjoints scatter-add.
template <typename S> Var<S> index_select(const Var<S>& a, Index axis, std::vector<Index> indices);
/// Mirror padding (edge sample not repeated) of the last two axes.
template <typename S> Var<S> reflect_pad2d(const Var<S>& a, Index top, Index bottom, Index left, Index right);
template <typename S> Var<S> crop2d(const Var<S>& a, Index top, Index left, Index height, Index width);

// The two structured broadcasts the networks need.

/// x[..., C] + b[C]
template <typename S> Var<S> add_bias(const Var<S>& x, const Var<S>& b);
/// x[N,C,H,W] * w[N,C] broadcast over H,W
template <typename S> Var<S> mul_channels(const Var<S>& x, const Var<S>& w);

}  // namespace dpec
