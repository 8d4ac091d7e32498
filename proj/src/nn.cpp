#include "dpec/nn.hpp"

#include <cmath>

namespace dpec {

namespace {

template <typename S>
using T = Tensor<S>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using CMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using MMap = Eigen::Map<RowMat<S>>;

struct ConvGeom {
  Index n, cin, h, w, cout, cg, kh, kw, stride, pad, groups, ho, wo;
  Index k() const { return cg * kh * kw; }
  Index p() const { return ho * wo; }
};

template <typename S>
ConvGeom conv_geometry(const Var<S>& x, const Conv2dParams<S>& p) {
  if (x.value().rank() != 4 || p.weight.value().rank() != 4) {
    throw Error(ErrorCode::ShapeMismatch,
                "conv2d " + shape_str(x.shape()) + " with weight " + shape_str(p.weight.shape()));
  }
  ConvGeom g{};
  g.n = x.dim(0), g.cin = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.cout = p.weight.dim(0), g.cg = p.weight.dim(1), g.kh = p.weight.dim(2), g.kw = p.weight.dim(3);
  g.stride = p.stride, g.pad = p.padding, g.groups = p.groups;
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0 || g.cin / g.groups != g.cg ||
      g.stride < 1 || g.pad < 0) {
    throw Error(ErrorCode::ShapeMismatch,
                "conv2d channels: input " + shape_str(x.shape()) + ", weight " + shape_str(p.weight.shape()));
  }
  const Index hnum = g.h + 2 * g.pad - g.kh, wnum = g.w + 2 * g.pad - g.kw;
  if (hnum < 0 || wnum < 0) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d kernel larger than padded input " + shape_str(x.shape()));
  }
  g.ho = hnum / g.stride + 1;
  g.wo = wnum / g.stride + 1;
  if (p.bias && (p.bias->value().rank() != 1 || p.bias->size() != g.cout)) {
    throw Error(ErrorCode::ShapeMismatch, "conv2d bias " + shape_str(p.bias->shape()));
  }
  return g;
}

// Unfolds one group of one image into a [K, P] row-major matrix.
template <typename S>
void im2col(const S* x, const ConvGeom& g, S* col) {
  const Index P = g.p();
  for (Index c = 0; c < g.cg; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          S* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, S(0));
            continue;
          }
          const S* src = x + (c * g.h + iy) * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix < 0 || ix >= g.w) ? S(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const S* col, const ConvGeom& g, S* x) {
  const Index P = g.p();
  for (Index c = 0; c < g.cg; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          S* dst = x + (c * g.h + iy) * g.w;
          const S* src = row + oy * g.wo;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename S>
Var<S> conv2d_gemm(const Var<S>& x, const Conv2dParams<S>& p, const ConvGeom& g) {
  const Index K = g.k(), P = g.p(), coutg = g.cout / g.groups;
  T<S> y(Shape{g.n, g.cout, g.ho, g.wo});
  std::vector<S> col(static_cast<std::size_t>(K * P));
  for (Index n = 0; n < g.n; ++n) {
    for (Index gi = 0; gi < g.groups; ++gi) {
      im2col(x.value().data() + (n * g.cin + gi * g.cg) * g.h * g.w, g, col.data());
      MMap<S>(y.data() + (n * g.cout + gi * coutg) * P, coutg, P).noalias() =
          CMap<S>(p.weight.value().data() + gi * coutg * K, coutg, K) * CMap<S>(col.data(), K, P);
    }
  }
  if (p.bias) {
    for (Index n = 0; n < g.n; ++n) {
      for (Index co = 0; co < g.cout; ++co) {
        y.array().segment((n * g.cout + co) * P, P) += p.bias->value()[co];
      }
    }
  }
  std::vector<Var<S>> inputs{x, p.weight};
  if (p.bias) inputs.push_back(*p.bias);
  const Var<S> w = p.weight;
  const std::optional<Var<S>> b = p.bias;
  return x.graph().record(std::move(y), std::span<const Var<S>>(inputs), [x, w, b, g](const T<S>& gy) {
    auto& gr = x.graph();
    const Index K = g.k(), P = g.p(), coutg = g.cout / g.groups;
    const bool need_x = x.requires_grad(), need_w = w.requires_grad();
    if (need_x || need_w) {
      T<S> gw(w.shape());
      T<S> gx(need_x ? x.shape() : Shape{1});
      std::vector<S> col(static_cast<std::size_t>(K * P));
      RowMat<S> gcol;
      for (Index n = 0; n < g.n; ++n) {
        for (Index gi = 0; gi < g.groups; ++gi) {
          CMap<S> gym(gy.data() + (n * g.cout + gi * coutg) * P, coutg, P);
          if (need_w) {
            im2col(x.value().data() + (n * g.cin + gi * g.cg) * g.h * g.w, g, col.data());
            MMap<S>(gw.data() + gi * coutg * K, coutg, K).noalias() +=
                gym * CMap<S>(col.data(), K, P).transpose();
          }
          if (need_x) {
            gcol.noalias() = CMap<S>(w.value().data() + gi * coutg * K, coutg, K).transpose() * gym;
            col2im(gcol.data(), g, gx.data() + (n * g.cin + gi * g.cg) * g.h * g.w);
          }
        }
      }
      if (need_w) gr.accumulate(w, std::move(gw));
      if (need_x) gr.accumulate(x, std::move(gx));
    }
    if (b && b->requires_grad()) {
      T<S> gb(b->shape());
      for (Index n = 0; n < g.n; ++n) {
        for (Index co = 0; co < g.cout; ++co) gb[co] += gy.array().segment((n * g.cout + co) * P, P).sum();
      }
      gr.accumulate(*b, std::move(gb));
    }
  });
}

// groups == Cin == Cout: one kernel per channel, direct loops.
template <typename S>
Var<S> conv2d_depthwise(const Var<S>& x, const Conv2dParams<S>& p, const ConvGeom& g) {
  T<S> y(Shape{g.n, g.cout, g.ho, g.wo});
  const Index planes = g.n * g.cin;
  for (Index pl = 0; pl < planes; ++pl) {
    const Index c = pl % g.cin;
    const S* xp = x.value().data() + pl * g.h * g.w;
    const S* kp = p.weight.value().data() + c * g.kh * g.kw;
    S* yp = y.data() + pl * g.ho * g.wo;
    const S bias = p.bias ? p.bias->value()[c] : S(0);
    for (Index oy = 0; oy < g.ho; ++oy) {
      for (Index ox = 0; ox < g.wo; ++ox) {
        S acc = bias;
        for (Index ki = 0; ki < g.kh; ++ki) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          for (Index kj = 0; kj < g.kw; ++kj) {
            const Index ix = ox * g.stride - g.pad + kj;
            if (ix < 0 || ix >= g.w) continue;
            acc += kp[ki * g.kw + kj] * xp[iy * g.w + ix];
          }
        }
        yp[oy * g.wo + ox] = acc;
      }
    }
  }
  std::vector<Var<S>> inputs{x, p.weight};
  if (p.bias) inputs.push_back(*p.bias);
  const Var<S> w = p.weight;
  const std::optional<Var<S>> b = p.bias;
  return x.graph().record(std::move(y), std::span<const Var<S>>(inputs), [x, w, b, g](const T<S>& gy) {
    auto& gr = x.graph();
    const bool need_x = x.requires_grad(), need_w = w.requires_grad();
    const bool need_b = b && b->requires_grad();
    T<S> gx(need_x ? x.shape() : Shape{1});
    T<S> gw(w.shape());
    T<S> gb(need_b ? b->shape() : Shape{1});
    const Index planes = g.n * g.cin;
    for (Index pl = 0; pl < planes; ++pl) {
      const Index c = pl % g.cin;
      const S* xp = x.value().data() + pl * g.h * g.w;
      const S* kp = w.value().data() + c * g.kh * g.kw;
      const S* gp = gy.data() + pl * g.ho * g.wo;
      S* gxp = need_x ? gx.data() + pl * g.h * g.w : nullptr;
      S* gwp = gw.data() + c * g.kh * g.kw;
      for (Index oy = 0; oy < g.ho; ++oy) {
        for (Index ox = 0; ox < g.wo; ++ox) {
          const S go = gp[oy * g.wo + ox];
          if (need_b) gb[c] += go;
          for (Index ki = 0; ki < g.kh; ++ki) {
            const Index iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            for (Index kj = 0; kj < g.kw; ++kj) {
              const Index ix = ox * g.stride - g.pad + kj;
              if (ix < 0 || ix >= g.w) continue;
              if (need_w) gwp[ki * g.kw + kj] += go * xp[iy * g.w + ix];
              if (need_x) gxp[iy * g.w + ix] += go * kp[ki * g.kw + kj];
            }
          }
        }
      }
    }
    if (need_x) gr.accumulate(x, std::move(gx));
    if (need_w) gr.accumulate(w, std::move(gw));
    if (need_b) gr.accumulate(*b, std::move(gb));
  });
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Conv2dParams<S>& p) {
  const ConvGeom g = conv_geometry(x, p);
  if (g.groups > 1 && g.groups == g.cin && g.cout == g.cin) return conv2d_depthwise(x, p, g);
  return conv2d_gemm(x, p, g);
}

template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& weight, const std::optional<Var<S>>& bias) {
  if (weight.value().rank() != 4 || weight.dim(1) != 1 || weight.dim(2) % 2 == 0 || weight.dim(3) % 2 == 0) {
    throw Error(ErrorCode::ShapeMismatch, "depthwise weight " + shape_str(weight.shape()));
  }
  if (weight.dim(2) != weight.dim(3)) {
    throw Error(ErrorCode::ShapeMismatch, "depthwise kernel must be square");
  }
  Conv2dParams<S> p{weight, bias, 1, weight.dim(2) / 2, x.value().rank() == 4 ? x.dim(1) : 1};
  return conv2d(x, p);
}

template <typename S>
Var<S> layernorm(const Var<S>& x, const LayerNormParams<S>& p) {
  const Index c = x.shape().back();
  if (p.gamma.size() != c || p.beta.size() != c) {
    throw Error(ErrorCode::ShapeMismatch, "layernorm over " + shape_str(x.shape()) + " with gamma " +
                                              shape_str(p.gamma.shape()));
  }
  const Index rows = x.size() / c;
  auto xhat = std::make_shared<T<S>>(x.shape());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
  T<S> y(x.shape());
  const auto& gamma = p.gamma.value().array();
  const auto& beta = p.beta.value().array();
  for (Index r = 0; r < rows; ++r) {
    auto xr = x.value().array().segment(r * c, c);
    const S mu = xr.mean();
    const S var = (xr - mu).square().mean();
    const S is = S(1) / std::sqrt(var + p.eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    xhat->array().segment(r * c, c) = (xr - mu) * is;
    y.array().segment(r * c, c) = xhat->array().segment(r * c, c) * gamma + beta;
  }
  const Var<S> gv = p.gamma, bv = p.beta;
  return x.graph().record(std::move(y), {x, p.gamma, p.beta}, [x, gv, bv, xhat, inv_std, rows, c](const T<S>& g) {
    auto& gr = x.graph();
    if (gv.requires_grad() || bv.requires_grad()) {
      T<S> gg(gv.shape()), gb(bv.shape());
      for (Index r = 0; r < rows; ++r) {
        gg.array() += g.array().segment(r * c, c) * xhat->array().segment(r * c, c);
        gb.array() += g.array().segment(r * c, c);
      }
      gr.accumulate(gv, std::move(gg));
      gr.accumulate(bv, std::move(gb));
    }
    if (x.requires_grad()) {
      T<S> gx(x.shape());
      const auto& gamma = gv.value().array();
      for (Index r = 0; r < rows; ++r) {
        const auto xh = xhat->array().segment(r * c, c);
        const typename T<S>::Array gh = g.array().segment(r * c, c) * gamma;
        const S m1 = gh.mean();
        const S m2 = (gh * xh).mean();
        gx.array().segment(r * c, c) = (gh - m1 - xh * m2) * (*inv_std)[static_cast<std::size_t>(r)];
      }
      gr.accumulate(x, std::move(gx));
    }
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const LinearParams<S>& p) {
  if (p.weight.value().rank() != 2 || x.shape().back() != p.weight.dim(0)) {
    throw Error(ErrorCode::ShapeMismatch,
                "linear " + shape_str(x.shape()) + " with weight " + shape_str(p.weight.shape()));
  }
  const Index in = p.weight.dim(0), out = p.weight.dim(1);
  Shape osh = x.shape();
  osh.back() = out;
  Var<S> y = reshape(matmul(reshape(x, Shape{x.size() / in, in}), p.weight), osh);
  if (p.bias) y = add_bias(y, *p.bias);
  return y;
}

template <typename S>
Var<S> pixel_shuffle_nhwc(const Var<S>& x, Index f) {
  if (x.value().rank() != 4 || x.dim(3) % (f * f) != 0) {
    throw Error(ErrorCode::ShapeMismatch, "pixel shuffle of " + shape_str(x.shape()));
  }
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3) / (f * f);
  auto r = reshape(x, Shape{n, h, w, f, f, c});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(r, Shape{n, h * f, w * f, c});
}

template <typename S>
Var<S> patch_embed(const Var<S>& img, const Conv2dParams<S>& conv, const LayerNormParams<S>& norm) {
  if (img.value().rank() != 4 || img.dim(2) % 4 != 0 || img.dim(3) % 4 != 0) {
    throw Error(ErrorCode::ShapeMismatch, "patch_embed needs H, W divisible by 4, got " + shape_str(img.shape()));
  }
  const auto& wsh = conv.weight.shape();
  if (wsh[2] != 4 || wsh[3] != 4 || conv.stride != 4 || conv.padding != 0) {
    throw Error(ErrorCode::ShapeMismatch, "patch_embed expects a 4x4 stride-4 convolution");
  }
  return layernorm(to_nhwc(conv2d(img, conv)), norm);
}

template <typename S>
Var<S> patch_merge(const Var<S>& x, const LayerNormParams<S>& norm, const LinearParams<S>& reduce) {
  if (x.value().rank() != 4 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0) {
    throw Error(ErrorCode::ShapeMismatch, "patch_merge needs even h, w, got " + shape_str(x.shape()));
  }
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  auto r = reshape(x, Shape{n, h / 2, 2, w / 2, 2, c});
  r = permute(r, {0, 1, 3, 2, 4, 5});
  r = reshape(r, Shape{n, h / 2, w / 2, 4 * c});
  return linear(layernorm(r, norm), reduce);
}

template <typename S>
Var<S> patch_expand(const Var<S>& x, const LinearParams<S>& proj, Index factor) {
  return pixel_shuffle_nhwc(linear(x, proj), factor);
}

template <typename S>
Var<S> resize_bilinear(const Var<S>& x, Index out_h, Index out_w) {
  if (x.value().rank() != 4 || out_h < 1 || out_w < 1) {
    throw Error(ErrorCode::ShapeMismatch, "resize_bilinear of " + shape_str(x.shape()));
  }
  const Index h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  struct Tap {
    Index i0, i1;
    S l1;
  };
  auto taps = [](Index in, Index out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      Index i0 = static_cast<Index>(std::floor(src));
      if (i0 > in - 1) i0 = in - 1;
      const Index i1 = std::min(i0 + 1, in - 1);
      t[static_cast<std::size_t>(o)] = Tap{i0, i1, static_cast<S>(src - static_cast<double>(i0))};
    }
    return t;
  };
  auto ty = std::make_shared<const std::vector<Tap>>(taps(h, out_h));
  auto tx = std::make_shared<const std::vector<Tap>>(taps(w, out_w));
  const Index planes = x.dim(0) * x.dim(1);
  T<S> y(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (Index p = 0; p < planes; ++p) {
    const S* xp = x.value().data() + p * h * w;
    S* yp = y.data() + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const Tap& a = (*ty)[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const Tap& b = (*tx)[static_cast<std::size_t>(ox)];
        const S top = xp[a.i0 * w + b.i0] * (S(1) - b.l1) + xp[a.i0 * w + b.i1] * b.l1;
        const S bot = xp[a.i1 * w + b.i0] * (S(1) - b.l1) + xp[a.i1 * w + b.i1] * b.l1;
        yp[oy * out_w + ox] = top * (S(1) - a.l1) + bot * a.l1;
      }
    }
  }
  return x.graph().record(std::move(y), {x}, [x, ty, tx, planes, h, w, out_h, out_w](const T<S>& g) {
    T<S>& gx = x.graph().grad_buffer(x.id());
    for (Index p = 0; p < planes; ++p) {
      S* gxp = gx.data() + p * h * w;
      const S* gp = g.data() + p * out_h * out_w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const Tap& a = (*ty)[static_cast<std::size_t>(oy)];
        for (Index ox = 0; ox < out_w; ++ox) {
          const Tap& b = (*tx)[static_cast<std::size_t>(ox)];
          const S go = gp[oy * out_w + ox];
          gxp[a.i0 * w + b.i0] += go * (S(1) - a.l1) * (S(1) - b.l1);
          gxp[a.i0 * w + b.i1] += go * (S(1) - a.l1) * b.l1;
          gxp[a.i1 * w + b.i0] += go * a.l1 * (S(1) - b.l1);
          gxp[a.i1 * w + b.i1] += go * a.l1 * b.l1;
        }
      }
    }
  });
}

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  if (x.value().rank() != 4) throw Error(ErrorCode::ShapeMismatch, "upsample of " + shape_str(x.shape()));
  auto twice = [](Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(2 * n));
    for (Index i = 0; i < 2 * n; ++i) idx[static_cast<std::size_t>(i)] = i / 2;
    return idx;
  };
  return index_select(index_select(x, 2, twice(x.dim(2))), 3, twice(x.dim(3)));
}

template <typename S>
Var<S> adaptive_avg_pool2d(const Var<S>& x, Index out_h, Index out_w) {
  if (x.value().rank() != 4 || out_h < 1 || out_w < 1) {
    throw Error(ErrorCode::ShapeMismatch, "adaptive_avg_pool2d of " + shape_str(x.shape()));
  }
  const Index h = x.dim(2), w = x.dim(3);
  auto edges = [](Index in, Index out) {
    std::vector<std::pair<Index, Index>> e(static_cast<std::size_t>(out));
    for (Index o = 0; o < out; ++o) {
      e[static_cast<std::size_t>(o)] = {(o * in) / out, ((o + 1) * in + out - 1) / out};
    }
    return e;
  };
  const auto ey = edges(h, out_h), ex = edges(w, out_w);
  const Index planes = x.dim(0) * x.dim(1);
  T<S> y(Shape{x.dim(0), x.dim(1), out_h, out_w});
  for (Index p = 0; p < planes; ++p) {
    const S* xp = x.value().data() + p * h * w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = ey[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = ex[static_cast<std::size_t>(ox)];
        S acc = 0;
        for (Index i = y0; i < y1; ++i) {
          for (Index j = x0; j < x1; ++j) acc += xp[i * w + j];
        }
        y[(p * out_h + oy) * out_w + ox] = acc / static_cast<S>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return x.graph().record(std::move(y), {x}, [x, ey, ex, planes, h, w, out_h, out_w](const T<S>& g) {
    T<S>& gx = x.graph().grad_buffer(x.id());
    for (Index p = 0; p < planes; ++p) {
      S* gxp = gx.data() + p * h * w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const auto [y0, y1] = ey[static_cast<std::size_t>(oy)];
        for (Index ox = 0; ox < out_w; ++ox) {
          const auto [x0, x1] = ex[static_cast<std::size_t>(ox)];
          const S go = g[(p * out_h + oy) * out_w + ox] / static_cast<S>((y1 - y0) * (x1 - x0));
          for (Index i = y0; i < y1; ++i) {
            for (Index j = x0; j < x1; ++j) gxp[i * w + j] += go;
          }
        }
      }
    }
  });
}

template <typename S>
Var<S> min_pool2d(const Var<S>& x, Index k) {
  if (x.value().rank() != 4 || k < 1 || x.dim(2) < k || x.dim(3) < k) {
    throw Error(ErrorCode::ShapeMismatch, "min_pool2d window " + std::to_string(k) + " on " + shape_str(x.shape()));
  }
  const Index h = x.dim(2), w = x.dim(3), ho = h - k + 1, wo = w - k + 1;
  const Index planes = x.dim(0) * x.dim(1);
  T<S> y(Shape{x.dim(0), x.dim(1), ho, wo});
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.size()));
  for (Index p = 0; p < planes; ++p) {
    const S* xp = x.value().data() + p * h * w;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        Index best = oy * w + ox;
        for (Index i = oy; i < oy + k; ++i) {
          for (Index j = ox; j < ox + k; ++j) {
            if (xp[i * w + j] < xp[best]) best = i * w + j;
          }
        }
        const Index o = (p * ho + oy) * wo + ox;
        y[o] = xp[best];
        (*arg)[static_cast<std::size_t>(o)] = p * h * w + best;
      }
    }
  }
  return x.graph().record(std::move(y), {x}, [x, arg](const T<S>& g) {
    T<S>& gx = x.graph().grad_buffer(x.id());
    for (Index o = 0; o < g.size(); ++o) gx[(*arg)[static_cast<std::size_t>(o)]] += g[o];
  });
}

std::vector<double> gaussian_taps(Index size, double sigma) {
  std::vector<double> t(static_cast<std::size_t>(size));
  const double c = static_cast<double>(size - 1) / 2.0;
  double total = 0;
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    t[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
    total += t[static_cast<std::size_t>(i)];
  }
  for (auto& v : t) v /= total;
  return t;
}

#define DPEC_INSTANTIATE_NN(S)                                                                    \
  template Var<S> conv2d(const Var<S>&, const Conv2dParams<S>&);                                  \
  template Var<S> depthwise_conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&);   \
  template Var<S> layernorm(const Var<S>&, const LayerNormParams<S>&);                            \
  template Var<S> linear(const Var<S>&, const LinearParams<S>&);                                  \
  template Var<S> pixel_shuffle_nhwc(const Var<S>&, Index);                                       \
  template Var<S> patch_embed(const Var<S>&, const Conv2dParams<S>&, const LayerNormParams<S>&);  \
  template Var<S> patch_merge(const Var<S>&, const LayerNormParams<S>&, const LinearParams<S>&);  \
  template Var<S> patch_expand(const Var<S>&, const LinearParams<S>&, Index);                     \
  template Var<S> resize_bilinear(const Var<S>&, Index, Index);                                   \
  template Var<S> upsample_nearest2x(const Var<S>&);                                              \
  template Var<S> adaptive_avg_pool2d(const Var<S>&, Index, Index);                               \
  template Var<S> min_pool2d(const Var<S>&, Index);

DPEC_INSTANTIATE_NN(float)
DPEC_INSTANTIATE_NN(double)

}  // namespace dpec
