#include "dpec/ss2d.hpp"

#include <algorithm>
#include <cmath>

namespace dpec {

std::vector<Index> scan_order(ScanDirection dir, Index h, Index w) {
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(h * w));
  switch (dir) {
    case ScanDirection::top_left_row_major:
    case ScanDirection::bottom_right_row_major:
      for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) order.push_back(r * w + c);
      }
      break;
    case ScanDirection::top_right_column_major:
    case ScanDirection::bottom_left_column_major:
      for (Index c = w - 1; c >= 0; --c) {
        for (Index r = 0; r < h; ++r) order.push_back(r * w + c);
      }
      break;
  }
  if (dir == ScanDirection::bottom_right_row_major || dir == ScanDirection::bottom_left_column_major) {
    std::reverse(order.begin(), order.end());
  }
  return order;
}

std::vector<Index> inverse_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size(), -1);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const Index p = perm[k];
    if (p < 0 || p >= static_cast<Index>(perm.size()) || inv[static_cast<std::size_t>(p)] != -1) {
      throw Error(ErrorCode::ShapeMismatch, "not a permutation");
    }
    inv[static_cast<std::size_t>(p)] = static_cast<Index>(k);
  }
  return inv;
}

template <typename S>
DirectionalSequences<S> scan_expand(const Var<S>& x) {
  if (x.value().rank() != 4) throw Error(ErrorCode::ShapeMismatch, "scan_expand of " + shape_str(x.shape()));
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  const Var<S> flat = reshape(x, Shape{n, h * w, d});
  DirectionalSequences<S> out;
  out.h = h;
  out.w = w;
  for (std::size_t k = 0; k < kScanDirections.size(); ++k) {
    out.seq[k] = index_select(flat, 1, scan_order(kScanDirections[k], h, w));
  }
  return out;
}

template <typename S>
Var<S> scan_merge(const DirectionalSequences<S>& seqs) {
  const Shape& ref = seqs.seq[0].shape();
  for (const auto& s : seqs.seq) {
    if (s.shape() != ref) throw Error(ErrorCode::ShapeMismatch, "scan_merge sequences differ in shape");
  }
  if (ref.size() != 3 || ref[1] != seqs.h * seqs.w) {
    throw Error(ErrorCode::ShapeMismatch, "scan_merge sequence " + shape_str(ref) + " for grid " +
                                              std::to_string(seqs.h) + "x" + std::to_string(seqs.w));
  }
  Var<S> acc;
  for (std::size_t k = 0; k < kScanDirections.size(); ++k) {
    auto grid = index_select(seqs.seq[k], 1, inverse_permutation(scan_order(kScanDirections[k], seqs.h, seqs.w)));
    acc = k == 0 ? grid : add(acc, grid);
  }
  return reshape(acc, Shape{ref[0], seqs.h, seqs.w, ref[2]});
}

template <typename S>
S zoh_gain(S z) {
  if (std::abs(static_cast<double>(z)) < kZohSeriesThreshold) return S(1) + z / S(2);
  return std::expm1(z) / z;
}

namespace {

template <typename S>
S zoh_gain_derivative(S z) {
  if (std::abs(static_cast<double>(z)) < kZohSeriesThreshold) return S(0.5);
  const S em1 = std::expm1(z);
  return (z * (em1 + S(1)) - em1) / (z * z);
}

}  // namespace

template <typename S>
Var<S> selective_scan(const Var<S>& u, const Var<S>& delta, const Var<S>& a, const Var<S>& b,
                      const Var<S>& c, const Var<S>& d_skip) {
  if (u.value().rank() != 3 || delta.shape() != u.shape() || a.value().rank() != 2 ||
      a.dim(0) != u.dim(2) || b.value().rank() != 3 || b.dim(0) != u.dim(0) || b.dim(1) != u.dim(1) ||
      b.dim(2) != a.dim(1) || c.shape() != b.shape() || d_skip.size() != u.dim(2)) {
    throw Error(ErrorCode::ShapeMismatch, "selective_scan u " + shape_str(u.shape()) + ", A " +
                                              shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  const Index N = u.dim(0), L = u.dim(1), D = u.dim(2), M = a.dim(1);
  const bool keep = Graph<S>::any_requires_grad(std::array<Var<S>, 6>{u, delta, a, b, c, d_skip});
  auto states = std::make_shared<std::vector<S>>(keep ? static_cast<std::size_t>(N * L * D * M) : 0);

  const S* up = u.value().data();
  const S* dp = delta.value().data();
  const S* ap = a.value().data();
  const S* bp = b.value().data();
  const S* cp = c.value().data();
  const S* sp = d_skip.value().data();
  Tensor<S> y(u.shape());
  std::vector<S> h(static_cast<std::size_t>(D * M));
  for (Index n = 0; n < N; ++n) {
    std::fill(h.begin(), h.end(), S(0));
    for (Index t = 0; t < L; ++t) {
      const Index tok = n * L + t;
      for (Index d = 0; d < D; ++d) {
        const S x = up[tok * D + d];
        const S dt = dp[tok * D + d];
        S acc = sp[d] * x;
        for (Index m = 0; m < M; ++m) {
          const S z = dt * ap[d * M + m];
          S& hs = h[static_cast<std::size_t>(d * M + m)];
          hs = std::exp(z) * hs + zoh_gain(z) * dt * bp[tok * M + m] * x;
          acc += cp[tok * M + m] * hs;
        }
        y[tok * D + d] = acc;
      }
      if (keep) std::copy(h.begin(), h.end(), states->begin() + tok * D * M);
    }
  }

  return u.graph().record(
      std::move(y), {u, delta, a, b, c, d_skip}, [u, delta, a, b, c, d_skip, states, N, L, D, M](const Tensor<S>& g) {
        const S* up = u.value().data();
        const S* dp = delta.value().data();
        const S* ap = a.value().data();
        const S* bp = b.value().data();
        const S* cp = c.value().data();
        const S* sp = d_skip.value().data();
        const S* hs = states->data();
        Tensor<S> gu(u.shape()), gdelta(delta.shape()), ga(a.shape()), gb(b.shape()), gc(c.shape()),
            gskip(d_skip.shape());
        std::vector<S> gh(static_cast<std::size_t>(D * M));
        for (Index n = 0; n < N; ++n) {
          std::fill(gh.begin(), gh.end(), S(0));
          for (Index t = L - 1; t >= 0; --t) {
            const Index tok = n * L + t;
            for (Index d = 0; d < D; ++d) {
              const S gy = g[tok * D + d];
              const S x = up[tok * D + d];
              const S dt = dp[tok * D + d];
              S gx = gy * sp[d];
              S gdt = 0;
              gskip[d] += gy * x;
              for (Index m = 0; m < M; ++m) {
                const Index dm = d * M + m;
                const S am = ap[dm];
                const S bm = bp[tok * M + m];
                const S h_t = hs[tok * D * M + dm];
                const S h_prev = t > 0 ? hs[(tok - 1) * D * M + dm] : S(0);
                const S z = dt * am;
                const S abar = std::exp(z);
                const S phi = zoh_gain(z);
                const S dphi = zoh_gain_derivative(z);
                S& ghs = gh[static_cast<std::size_t>(dm)];
                ghs += gy * cp[tok * M + m];
                gc[tok * M + m] += gy * h_t;
                const S g_abar = ghs * h_prev;
                const S g_bbar = ghs * x;
                gx += ghs * phi * dt * bm;
                gdt += g_abar * abar * am + g_bbar * (dphi * am * dt + phi) * bm;
                ga[dm] += g_abar * abar * dt + g_bbar * dphi * dt * dt * bm;
                gb[tok * M + m] += g_bbar * phi * dt;
                ghs *= abar;
              }
              gu[tok * D + d] = gx;
              gdelta[tok * D + d] = gdt;
            }
          }
        }
        auto& gr = u.graph();
        gr.accumulate(u, std::move(gu));
        gr.accumulate(delta, std::move(gdelta));
        gr.accumulate(a, std::move(ga));
        gr.accumulate(b, std::move(gb));
        gr.accumulate(c, std::move(gc));
        gr.accumulate(d_skip, std::move(gskip));
      });
}

template <typename S>
Var<S> s6_forward(const Var<S>& seq, const S6Params<S>& p) {
  if (seq.value().rank() != 3) throw Error(ErrorCode::ShapeMismatch, "s6_forward of " + shape_str(seq.shape()));
  if (!seq.value().array().allFinite()) throw Error(ErrorCode::NonFiniteInput, "s6_forward input has NaN/Inf");
  const Index r = p.dt_rank, m = p.d_state;
  if (p.x_proj.weight.dim(1) != r + 2 * m) {
    throw Error(ErrorCode::ShapeMismatch, "x_proj width " + std::to_string(p.x_proj.weight.dim(1)) +
                                              " != dt_rank + 2*d_state");
  }
  const Var<S> proj = linear(seq, p.x_proj);
  const Var<S> dt = slice(proj, 2, 0, r);
  const Var<S> b = slice(proj, 2, r, m);
  const Var<S> c = slice(proj, 2, r + m, m);
  const Var<S> delta = softplus(linear(dt, p.dt_proj));
  const Var<S> a = neg(exp(p.a_log));
  return selective_scan(seq, delta, a, b, c, p.d_skip);
}

template <typename S>
Var<S> ss2d_apply(const Var<S>& x, std::span<const S6Params<S>> params, const LayerNormParams<S>& norm) {
  if (params.size() != 1 && params.size() != 4) {
    throw Error(ErrorCode::ShapeMismatch, "ss2d_apply needs 1 shared or 4 per-direction parameter sets");
  }
  DirectionalSequences<S> seqs = scan_expand(x);
  for (std::size_t k = 0; k < 4; ++k) {
    seqs.seq[k] = s6_forward(seqs.seq[k], params[params.size() == 1 ? 0 : k]);
  }
  return layernorm(scan_merge(seqs), norm);
}

#define DPEC_INSTANTIATE_SS2D(S)                                                                   \
  template DirectionalSequences<S> scan_expand(const Var<S>&);                                     \
  template Var<S> scan_merge(const DirectionalSequences<S>&);                                      \
  template S zoh_gain(S);                                                                          \
  template Var<S> selective_scan(const Var<S>&, const Var<S>&, const Var<S>&, const Var<S>&,       \
                                 const Var<S>&, const Var<S>&);                                    \
  template Var<S> s6_forward(const Var<S>&, const S6Params<S>&);                                   \
  template Var<S> ss2d_apply(const Var<S>&, std::span<const S6Params<S>>, const LayerNormParams<S>&);

DPEC_INSTANTIATE_SS2D(float)
DPEC_INSTANTIATE_SS2D(double)

}  // namespace dpec
