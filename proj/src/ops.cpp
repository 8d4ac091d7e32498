#include "dpec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dpec {

namespace {

template <typename S>
using T = Tensor<S>;
template <typename S>
using Arr = typename Tensor<S>::Array;

template <typename S>
struct Expanded {
  Shape shape;
  Arr<S> a, b;
  bool a_scalar = false;
  bool b_scalar = false;
};

template <typename S>
Expanded<S> expand(const Var<S>& a, const Var<S>& b, const char* op) {
  Expanded<S> e;
  if (a.shape() == b.shape()) {
    e.shape = a.shape();
    e.a = a.value().array();
    e.b = b.value().array();
  } else if (a.size() == 1) {
    e.shape = b.shape();
    e.a = Arr<S>::Constant(b.size(), a.value()[0]);
    e.b = b.value().array();
    e.a_scalar = true;
  } else if (b.size() == 1) {
    e.shape = a.shape();
    e.a = a.value().array();
    e.b = Arr<S>::Constant(a.size(), b.value()[0]);
    e.b_scalar = true;
  } else {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + " of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return e;
}

// Folds an adjoint shaped like the broadcast result back onto an operand.
template <typename S>
T<S> fold(const Var<S>& operand, bool was_scalar, Arr<S> g) {
  if (was_scalar) return T<S>(operand.shape(), Arr<S>::Constant(1, g.sum()));
  return T<S>(operand.shape(), std::move(g));
}

template <typename S, typename F, typename D>
Var<S> unary(const Var<S>& a, F f, D df) {
  auto y = std::make_shared<const T<S>>(a.shape(), Arr<S>(f(a.value().array())));
  return a.graph().record(y, {a}, [a, y, df](const T<S>& g) {
    a.graph().accumulate(a, T<S>(a.shape(), Arr<S>(g.array() * df(a.value().array(), y->array()))));
  });
}

std::vector<Index> normalize_axes(std::vector<Index> axes, Index rank) {
  for (auto& ax : axes) {
    if (ax < 0) ax += rank;
    if (ax < 0 || ax >= rank) {
      throw Error(ErrorCode::AxisOutOfRange, "axis out of range for rank " + std::to_string(rank));
    }
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
    throw Error(ErrorCode::AxisOutOfRange, "duplicate reduction axis");
  }
  return axes;
}

std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// out[offset] = in[map(offset)] for a permutation of axes.
template <typename S>
T<S> permute_tensor(const T<S>& in, const std::vector<Index>& perm) {
  const Shape& ish = in.shape();
  const auto ist = strides_of(ish);
  Shape osh(perm.size());
  std::vector<Index> src_stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    osh[i] = ish[static_cast<std::size_t>(perm[i])];
    src_stride[i] = ist[static_cast<std::size_t>(perm[i])];
  }
  T<S> out(osh);
  const Index n = out.size();
  const std::size_t r = osh.size();
  std::vector<Index> idx(r, 0);
  Index src = 0;
  const S* ip = in.data();
  S* op = out.data();
  for (Index o = 0; o < n; ++o) {
    op[o] = ip[src];
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < osh[k]) {
        src += src_stride[k];
        break;
      }
      src -= src_stride[k] * (osh[k] - 1);
      idx[k] = 0;
    }
  }
  return out;
}

// Split of a shape around one axis: [outer, axis, inner].
struct AxisSplit {
  Index outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw Error(ErrorCode::AxisOutOfRange, "axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  }
  return axis;
}

Index reflect_index(Index i, Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

}  // namespace

// ---------------------------------------------------------------- element-wise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  auto e = expand(a, b, "add");
  T<S> y(e.shape, Arr<S>(e.a + e.b));
  const bool as = e.a_scalar, bs = e.b_scalar;
  return a.graph().record(std::move(y), {a, b}, [a, b, as, bs](const T<S>& g) {
    auto& gr = a.graph();
    if (a.requires_grad()) gr.accumulate(a, fold(a, as, g.array()));
    if (b.requires_grad()) gr.accumulate(b, fold(b, bs, g.array()));
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  auto e = expand(a, b, "sub");
  T<S> y(e.shape, Arr<S>(e.a - e.b));
  const bool as = e.a_scalar, bs = e.b_scalar;
  return a.graph().record(std::move(y), {a, b}, [a, b, as, bs](const T<S>& g) {
    auto& gr = a.graph();
    if (a.requires_grad()) gr.accumulate(a, fold(a, as, g.array()));
    if (b.requires_grad()) gr.accumulate(b, fold(b, bs, Arr<S>(-g.array())));
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  auto e = std::make_shared<Expanded<S>>(expand(a, b, "mul"));
  T<S> y(e->shape, Arr<S>(e->a * e->b));
  return a.graph().record(std::move(y), {a, b}, [a, b, e](const T<S>& g) {
    auto& gr = a.graph();
    if (a.requires_grad()) gr.accumulate(a, fold(a, e->a_scalar, Arr<S>(g.array() * e->b)));
    if (b.requires_grad()) gr.accumulate(b, fold(b, e->b_scalar, Arr<S>(g.array() * e->a)));
  });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b, DivMode mode) {
  if (mode == DivMode::strict && (b.value().array() == S(0)).any()) {
    throw Error(ErrorCode::DivisionDomain, "denominator contains an exact zero");
  }
  auto e = std::make_shared<Expanded<S>>(expand(a, b, "div"));
  T<S> y(e->shape, Arr<S>(e->a / e->b));
  return a.graph().record(std::move(y), {a, b}, [a, b, e](const T<S>& g) {
    auto& gr = a.graph();
    if (a.requires_grad()) gr.accumulate(a, fold(a, e->a_scalar, Arr<S>(g.array() / e->b)));
    if (b.requires_grad()) {
      gr.accumulate(b, fold(b, e->b_scalar, Arr<S>(-g.array() * e->a / e->b.square())));
    }
  });
}

template <typename S>
Var<S> add(const Var<S>& a, S c) {
  return unary(a, [c](const Arr<S>& x) { return x + c; },
               [](const Arr<S>& x, const Arr<S>&) { return Arr<S>::Ones(x.size()); });
}

template <typename S>
Var<S> mul(const Var<S>& a, S c) {
  return unary(a, [c](const Arr<S>& x) { return x * c; },
               [c](const Arr<S>& x, const Arr<S>&) { return Arr<S>::Constant(x.size(), c); });
}

template <typename S>
Var<S> rsub(S c, const Var<S>& a) {
  return unary(a, [c](const Arr<S>& x) { return c - x; },
               [](const Arr<S>& x, const Arr<S>&) { return Arr<S>::Constant(x.size(), S(-1)); });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return mul(a, S(-1));
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.exp(); },
               [](const Arr<S>&, const Arr<S>& y) { return y; });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.log(); },
               [](const Arr<S>& x, const Arr<S>&) { return x.inverse(); });
}

template <typename S>
Var<S> pow(const Var<S>& a, S p) {
  return unary(
      a, [p](const Arr<S>& x) { return x.pow(p); },
      [p](const Arr<S>& x, const Arr<S>&) {
        return Arr<S>(x.unaryExpr([p](S v) {
          if (v == S(0)) return p == S(1) ? S(1) : S(0);
          return p * std::pow(v, p - S(1));
        }));
      });
}

template <typename S>
Var<S> abs(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.abs(); },
               [](const Arr<S>& x, const Arr<S>&) {
                 return Arr<S>(x.unaryExpr([](S v) { return v > 0 ? S(1) : (v < 0 ? S(-1) : S(0)); }));
               });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.sqrt(); },
               [](const Arr<S>&, const Arr<S>& y) { return Arr<S>(S(0.5) / y); });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.square(); },
               [](const Arr<S>& x, const Arr<S>&) { return Arr<S>(S(2) * x); });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return (S(1) + (-x).exp()).inverse(); },
               [](const Arr<S>&, const Arr<S>& y) { return Arr<S>(y * (S(1) - y)); });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x / (S(1) + (-x).exp()); },
               [](const Arr<S>& x, const Arr<S>&) {
                 Arr<S> s = (S(1) + (-x).exp()).inverse();
                 return Arr<S>(s * (S(1) + x * (S(1) - s)));
               });
}

template <typename S>
Var<S> softplus(const Var<S>& a) {
  return unary(
      a,
      [](const Arr<S>& x) {
        return Arr<S>(x.unaryExpr([](S v) { return v > S(20) ? v : std::log1p(std::exp(v)); }));
      },
      [](const Arr<S>& x, const Arr<S>&) { return Arr<S>((S(1) + (-x).exp()).inverse()); });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return unary(a, [](const Arr<S>& x) { return x.max(S(0)); },
               [](const Arr<S>& x, const Arr<S>&) { return Arr<S>((x > S(0)).template cast<S>()); });
}

template <typename S>
Var<S> clamp(const Var<S>& a, S lo, S hi) {
  return unary(a, [lo, hi](const Arr<S>& x) { return x.max(lo).min(hi); },
               [lo, hi](const Arr<S>& x, const Arr<S>&) {
                 return Arr<S>(((x >= lo) && (x <= hi)).template cast<S>());
               });
}

// ---------------------------------------------------------------------- matmul

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorCode::ShapeMismatch,
                "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  T<S> y(Shape{m, n});
  MMap(y.data(), m, n).noalias() = CMap(a.value().data(), m, k) * CMap(b.value().data(), k, n);
  return a.graph().record(std::move(y), {a, b}, [a, b, m, k, n](const T<S>& g) {
    auto& gr = a.graph();
    CMap gm(g.data(), m, n);
    if (a.requires_grad()) {
      T<S> ga(Shape{m, k});
      MMap(ga.data(), m, k).noalias() = gm * CMap(b.value().data(), k, n).transpose();
      gr.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      T<S> gb(Shape{k, n});
      MMap(gb.data(), k, n).noalias() = CMap(a.value().data(), m, k).transpose() * gm;
      gr.accumulate(b, std::move(gb));
    }
  });
}

// ------------------------------------------------------------------ reductions

template <typename S>
Var<S> reduce(Reduce op, const Var<S>& a, std::vector<Index> axes) {
  const Shape& ish = a.shape();
  axes = normalize_axes(std::move(axes), a.value().rank());
  std::vector<bool> reduced(ish.size(), false);
  for (Index ax : axes) reduced[static_cast<std::size_t>(ax)] = true;

  Shape osh;
  for (std::size_t i = 0; i < ish.size(); ++i) {
    if (!reduced[i]) osh.push_back(ish[i]);
  }
  if (osh.empty()) osh.push_back(1);

  // Output offset of every input element, walked with an odometer.
  std::vector<Index> ostride(ish.size(), 0);
  {
    Index s = 1;
    for (std::size_t i = ish.size(); i-- > 0;) {
      if (!reduced[i]) {
        ostride[i] = s;
        s *= ish[i];
      }
    }
  }
  const Index n = a.size();
  auto map = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  {
    std::vector<Index> idx(ish.size(), 0);
    Index o = 0;
    for (Index i = 0; i < n; ++i) {
      (*map)[static_cast<std::size_t>(i)] = o;
      for (std::size_t k = ish.size(); k-- > 0;) {
        if (++idx[k] < ish[k]) {
          o += ostride[k];
          break;
        }
        o -= ostride[k] * (ish[k] - 1);
        idx[k] = 0;
      }
    }
  }

  T<S> y(osh);
  const Index count = n / y.size();
  const S* x = a.value().data();
  if (op == Reduce::sum || op == Reduce::mean) {
    for (Index i = 0; i < n; ++i) y[(*map)[static_cast<std::size_t>(i)]] += x[i];
    if (op == Reduce::mean) y.array() /= static_cast<S>(count);
    return a.graph().record(std::move(y), {a}, [a, map, op, count](const T<S>& g) {
      T<S> ga(a.shape());
      const S scale = op == Reduce::mean ? S(1) / static_cast<S>(count) : S(1);
      for (Index i = 0; i < ga.size(); ++i) ga[i] = g[(*map)[static_cast<std::size_t>(i)]] * scale;
      a.graph().accumulate(a, std::move(ga));
    });
  }

  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(y.size()), -1);
  const bool is_min = op == Reduce::min;
  for (Index i = 0; i < n; ++i) {
    const Index o = (*map)[static_cast<std::size_t>(i)];
    Index& best = (*arg)[static_cast<std::size_t>(o)];
    if (best < 0 || (is_min ? x[i] < x[best] : x[i] > x[best])) best = i;
  }
  for (Index o = 0; o < y.size(); ++o) y[o] = x[(*arg)[static_cast<std::size_t>(o)]];
  return a.graph().record(std::move(y), {a}, [a, arg](const T<S>& g) {
    T<S> ga(a.shape());
    for (Index o = 0; o < g.size(); ++o) ga[(*arg)[static_cast<std::size_t>(o)]] += g[o];
    a.graph().accumulate(a, std::move(ga));
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  std::vector<Index> axes(static_cast<std::size_t>(a.value().rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  return reduce(Reduce::sum, a, axes);
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  std::vector<Index> axes(static_cast<std::size_t>(a.value().rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  return reduce(Reduce::mean, a, axes);
}

// ------------------------------------------------------------------- layout

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return a.graph().record(a.value().reshaped(std::move(shape)), {a}, [a](const T<S>& g) {
    a.graph().accumulate(a, g.reshaped(a.shape()));
  });
}

template <typename S>
Var<S> permute(const Var<S>& a, std::vector<Index> perm) {
  const Index r = a.value().rank();
  if (static_cast<Index>(perm.size()) != r) {
    throw Error(ErrorCode::AxisOutOfRange, "permutation rank mismatch");
  }
  std::vector<Index> inv(perm.size(), -1);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const Index p = perm[i];
    if (p < 0 || p >= r || inv[static_cast<std::size_t>(p)] != -1) {
      throw Error(ErrorCode::AxisOutOfRange, "invalid permutation");
    }
    inv[static_cast<std::size_t>(p)] = static_cast<Index>(i);
  }
  return a.graph().record(permute_tensor(a.value(), perm), {a}, [a, inv](const T<S>& g) {
    a.graph().accumulate(a, permute_tensor(g, inv));
  });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat of nothing");
  const Shape& ref = parts.front().shape();
  axis = normalize_axis(axis, static_cast<Index>(ref.size()));
  Shape osh = ref;
  osh[static_cast<std::size_t>(axis)] = 0;
  std::vector<Index> extents;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw Error(ErrorCode::ShapeMismatch, "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<Index>(i) != axis && s[i] != ref[i]) {
        throw Error(ErrorCode::ShapeMismatch, "concat " + shape_str(s) + " with " + shape_str(ref));
      }
    }
    extents.push_back(s[static_cast<std::size_t>(axis)]);
    osh[static_cast<std::size_t>(axis)] += extents.back();
  }
  const AxisSplit os = split_at(osh, axis);
  T<S> y(osh);
  Index start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Index chunk = extents[p] * os.inner;
    const S* src = parts[p].value().data();
    for (Index o = 0; o < os.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, y.data() + o * os.extent * os.inner + start * os.inner);
    }
    start += extents[p];
  }
  return parts.front().graph().record(
      std::move(y), std::span<const Var<S>>(parts), [parts, extents, os](const T<S>& g) {
        Index start = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
          if (parts[p].requires_grad()) {
            T<S> gp(parts[p].shape());
            const Index chunk = extents[p] * os.inner;
            for (Index o = 0; o < os.outer; ++o) {
              std::copy_n(g.data() + o * os.extent * os.inner + start * os.inner, chunk,
                          gp.data() + o * chunk);
            }
            parts[p].graph().accumulate(parts[p], std::move(gp));
          }
          start += extents[p];
        }
      });
}

template <typename S>
Var<S> slice(const Var<S>& a, Index axis, Index start, Index length) {
  axis = normalize_axis(axis, a.value().rank());
  const AxisSplit s = split_at(a.shape(), axis);
  if (start < 0 || length < 1 || start + length > s.extent) {
    throw Error(ErrorCode::AxisOutOfRange, "slice out of range on " + shape_str(a.shape()));
  }
  Shape osh = a.shape();
  osh[static_cast<std::size_t>(axis)] = length;
  T<S> y(osh);
  const Index chunk = length * s.inner;
  for (Index o = 0; o < s.outer; ++o) {
    std::copy_n(a.value().data() + o * s.extent * s.inner + start * s.inner, chunk, y.data() + o * chunk);
  }
  return a.graph().record(std::move(y), {a}, [a, s, start, chunk](const T<S>& g) {
    T<S>& ga = a.graph().grad_buffer(a.id());
    for (Index o = 0; o < s.outer; ++o) {
      S* dst = ga.data() + o * s.extent * s.inner + start * s.inner;
      const S* src = g.data() + o * chunk;
      for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

template <typename S>
Var<S> index_select(const Var<S>& a, Index axis, std::vector<Index> indices) {
  axis = normalize_axis(axis, a.value().rank());
  const AxisSplit s = split_at(a.shape(), axis);
  for (Index i : indices) {
    if (i < 0 || i >= s.extent) throw Error(ErrorCode::AxisOutOfRange, "index_select index out of range");
  }
  if (indices.empty()) throw Error(ErrorCode::ShapeMismatch, "index_select with no indices");
  Shape osh = a.shape();
  const Index k = static_cast<Index>(indices.size());
  osh[static_cast<std::size_t>(axis)] = k;
  T<S> y(osh);
  const S* x = a.value().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index j = 0; j < k; ++j) {
      std::copy_n(x + (o * s.extent + indices[static_cast<std::size_t>(j)]) * s.inner, s.inner,
                  y.data() + (o * k + j) * s.inner);
    }
  }
  auto idx = std::make_shared<const std::vector<Index>>(std::move(indices));
  return a.graph().record(std::move(y), {a}, [a, s, idx, k](const T<S>& g) {
    T<S>& ga = a.graph().grad_buffer(a.id());
    for (Index o = 0; o < s.outer; ++o) {
      for (Index j = 0; j < k; ++j) {
        S* dst = ga.data() + (o * s.extent + (*idx)[static_cast<std::size_t>(j)]) * s.inner;
        const S* src = g.data() + (o * k + j) * s.inner;
        for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename S>
Var<S> flip(const Var<S>& a, Index axis) {
  axis = normalize_axis(axis, a.value().rank());
  const Index n = a.shape()[static_cast<std::size_t>(axis)];
  std::vector<Index> rev(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) rev[static_cast<std::size_t>(i)] = n - 1 - i;
  return index_select(a, axis, std::move(rev));
}

template <typename S>
Var<S> reflect_pad2d(const Var<S>& a, Index top, Index bottom, Index left, Index right) {
  const Index r = a.value().rank();
  if (r < 2) throw Error(ErrorCode::ShapeMismatch, "reflect_pad2d needs rank >= 2");
  if (top == 0 && bottom == 0 && left == 0 && right == 0) return a;
  const Index h = a.dim(r - 2), w = a.dim(r - 1);
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw Error(ErrorCode::ShapeMismatch, "negative padding");
  }
  const Index ho = h + top + bottom, wo = w + left + right;
  const Index planes = a.size() / (h * w);
  std::vector<Index> src(static_cast<std::size_t>(ho * wo));
  for (Index i = 0; i < ho; ++i) {
    for (Index j = 0; j < wo; ++j) {
      src[static_cast<std::size_t>(i * wo + j)] = reflect_index(i - top, h) * w + reflect_index(j - left, w);
    }
  }
  Shape osh = a.shape();
  osh[static_cast<std::size_t>(r - 2)] = ho;
  osh[static_cast<std::size_t>(r - 1)] = wo;
  T<S> y(osh);
  for (Index p = 0; p < planes; ++p) {
    const S* x = a.value().data() + p * h * w;
    S* o = y.data() + p * ho * wo;
    for (Index q = 0; q < ho * wo; ++q) o[q] = x[src[static_cast<std::size_t>(q)]];
  }
  auto map = std::make_shared<const std::vector<Index>>(std::move(src));
  return a.graph().record(std::move(y), {a}, [a, map, planes, h, w, ho, wo](const T<S>& g) {
    T<S>& ga = a.graph().grad_buffer(a.id());
    for (Index p = 0; p < planes; ++p) {
      S* dst = ga.data() + p * h * w;
      const S* gp = g.data() + p * ho * wo;
      for (Index q = 0; q < ho * wo; ++q) dst[(*map)[static_cast<std::size_t>(q)]] += gp[q];
    }
  });
}

template <typename S>
Var<S> crop2d(const Var<S>& a, Index top, Index left, Index height, Index width) {
  const Index r = a.value().rank();
  if (top == 0 && left == 0 && height == a.dim(r - 2) && width == a.dim(r - 1)) return a;
  return slice(slice(a, r - 2, top, height), r - 1, left, width);
}

template <typename S>
Var<S> add_bias(const Var<S>& x, const Var<S>& b) {
  const Index c = b.size();
  if (b.value().rank() != 1 || x.shape().back() != c) {
    throw Error(ErrorCode::ShapeMismatch, "add_bias " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  }
  const Index rows = x.size() / c;
  T<S> y = x.value();
  for (Index i = 0; i < rows; ++i) y.array().segment(i * c, c) += b.value().array();
  return x.graph().record(std::move(y), {x, b}, [x, b, rows, c](const T<S>& g) {
    auto& gr = x.graph();
    if (x.requires_grad()) gr.accumulate(x, g);
    if (b.requires_grad()) {
      T<S> gb(b.shape());
      for (Index i = 0; i < rows; ++i) gb.array() += g.array().segment(i * c, c);
      gr.accumulate(b, std::move(gb));
    }
  });
}

template <typename S>
Var<S> mul_channels(const Var<S>& x, const Var<S>& w) {
  if (x.value().rank() != 4 || w.value().rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1)) {
    throw Error(ErrorCode::ShapeMismatch,
                "mul_channels " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
  }
  const Index planes = w.size(), hw = x.dim(2) * x.dim(3);
  T<S> y = x.value();
  for (Index p = 0; p < planes; ++p) y.array().segment(p * hw, hw) *= w.value()[p];
  return x.graph().record(std::move(y), {x, w}, [x, w, planes, hw](const T<S>& g) {
    auto& gr = x.graph();
    if (x.requires_grad()) {
      T<S> gx = g;
      for (Index p = 0; p < planes; ++p) gx.array().segment(p * hw, hw) *= w.value()[p];
      gr.accumulate(x, std::move(gx));
    }
    if (w.requires_grad()) {
      T<S> gw(w.shape());
      for (Index p = 0; p < planes; ++p) {
        gw[p] = (g.array().segment(p * hw, hw) * x.value().array().segment(p * hw, hw)).sum();
      }
      gr.accumulate(w, std::move(gw));
    }
  });
}

#define DPEC_INSTANTIATE_OPS(S)                                                        \
  template Var<S> add(const Var<S>&, const Var<S>&);                                   \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                   \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                   \
  template Var<S> div(const Var<S>&, const Var<S>&, DivMode);                          \
  template Var<S> add(const Var<S>&, S);                                               \
  template Var<S> mul(const Var<S>&, S);                                               \
  template Var<S> rsub(S, const Var<S>&);                                              \
  template Var<S> neg(const Var<S>&);                                                  \
  template Var<S> exp(const Var<S>&);                                                  \
  template Var<S> log(const Var<S>&);                                                  \
  template Var<S> pow(const Var<S>&, S);                                               \
  template Var<S> abs(const Var<S>&);                                                  \
  template Var<S> sqrt(const Var<S>&);                                                 \
  template Var<S> square(const Var<S>&);                                               \
  template Var<S> silu(const Var<S>&);                                                 \
  template Var<S> sigmoid(const Var<S>&);                                              \
  template Var<S> softplus(const Var<S>&);                                             \
  template Var<S> relu(const Var<S>&);                                                 \
  template Var<S> clamp(const Var<S>&, S, S);                                          \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                \
  template Var<S> reduce(Reduce, const Var<S>&, std::vector<Index>);                   \
  template Var<S> sum(const Var<S>&);                                                  \
  template Var<S> mean(const Var<S>&);                                                 \
  template Var<S> reshape(const Var<S>&, Shape);                                       \
  template Var<S> permute(const Var<S>&, std::vector<Index>);                          \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                           \
  template Var<S> slice(const Var<S>&, Index, Index, Index);                           \
  template Var<S> flip(const Var<S>&, Index);                                          \
  template Var<S> index_select(const Var<S>&, Index, std::vector<Index>);              \
  template Var<S> reflect_pad2d(const Var<S>&, Index, Index, Index, Index);            \
  template Var<S> crop2d(const Var<S>&, Index, Index, Index, Index);                   \
  template Var<S> add_bias(const Var<S>&, const Var<S>&);                              \
  template Var<S> mul_channels(const Var<S>&, const Var<S>&);

DPEC_INSTANTIATE_OPS(float)
DPEC_INSTANTIATE_OPS(double)

}  // namespace dpec
