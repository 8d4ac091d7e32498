#pragma once

#include <array>
#include <span>
#include <vector>

#include "dpec/nn.hpp"

namespace dpec {

/// The four traversal orders of a h x w token grid.
enum class ScanDirection {
  top_left_row_major,      // (0,0) -> (h-1,w-1), rows left to right
  bottom_right_row_major,  // exact reverse of the above
  top_right_column_major,  // columns right to left, each top to bottom; ends bottom-left
  bottom_left_column_major,  // exact reverse of the above
};

inline constexpr std::array<ScanDirection, 4> kScanDirections{
    ScanDirection::top_left_row_major, ScanDirection::bottom_right_row_major,
    ScanDirection::top_right_column_major, ScanDirection::bottom_left_column_major};

/// order[k] = row-major grid index visited at sequence position k.
std::vector<Index> scan_order(ScanDirection dir, Index h, Index w);
std::vector<Index> inverse_permutation(const std::vector<Index>& perm);

template <typename S>
struct DirectionalSequences {
  std::array<Var<S>, 4> seq;  // each [N, h*w, D], in kScanDirections order
  Index h = 0;
  Index w = 0;
};

/// x [N,h,w,D] -> four permuted flattenings.
template <typename S> DirectionalSequences<S> scan_expand(const Var<S>& x);
/// Inverse-permutes each sequence back to grid order and sums: -> [N,h,w,D].
template <typename S> Var<S> scan_merge(const DirectionalSequences<S>& seqs);

template <typename S>
struct S6Params {
  Var<S> a_log;  // [D, N]; A = -exp(a_log) < 0
  Var<S> d_skip;  // [D]
  LinearParams<S> x_proj;  // D -> dt_rank + 2N, no bias
  LinearParams<S> dt_proj;  // dt_rank -> D, with bias
  Index dt_rank = 1;
  Index d_state = 16;
};

inline Index default_dt_rank(Index d_model) { return (d_model + 15) / 16; }

/// Below this |dt*A| the zero-order-hold gain switches to its series form.
inline constexpr double kZohSeriesThreshold = 1e-4;

/// (exp(z) - 1) / z with the series fallback 1 + z/2 near zero.
template <typename S>
S zoh_gain(S z);

/// Fused selective recurrence over u [N,L,D]:
///   a_t = exp(delta_t * A),  b_t = zoh_gain(delta_t * A) * delta_t * B_t
///   h_t = a_t * h_{t-1} + b_t * u_t,  y_t = <C_t, h_t> + d_skip * u_t,  h_0 = 0
/// delta [N,L,D], A [D,Ns], B and C [N,L,Ns], d_skip [D].
template <typename S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b,
                      const Var<S>& c, const Var<S>& d_skip);

/// Input-dependent projection of delta, B, C followed by selective_scan.
/// Raises NonFiniteInput on NaN/Inf in `seq`.
template <typename S> Var<S> s6_forward(const Var<S>& seq, const S6Params<S>& p);

/// scan_expand -> s6_forward per direction -> scan_merge -> layernorm.
/// `params` holds one set shared by all directions or one per direction.
template <typename S>
Var<S> ss2d_apply(const Var<S>& x, std::span<const S6Params<S>> params, const LayerNormParams<S>& norm);

}  // namespace dpec
