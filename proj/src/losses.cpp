#include "dpec/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dpec/params.hpp"

namespace dpec {

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw Error(ErrorCode::ShapeMismatch, std::string(op) + " of " + shape_str(a) + " and " + shape_str(b));
}

void require_image(const char* op, const Shape& s) {
  if (s.size() != 4) throw Error(ErrorCode::ShapeMismatch, std::string(op) + " expects NCHW, got " + shape_str(s));
}

// Reflect (edge not repeated) index into [0, n).
Index mirror(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

template <typename S>
Var<S> l1_distance(const Var<S>& a, const Var<S>& b) {
  return sum(abs(sub(a, b)));
}

}  // namespace

template <typename S>
Var<S> soft_histogram(const Var<S>& x, Index bins, S lo, S hi) {
  if (bins < 1 || !(hi > lo)) throw Error(ErrorCode::ShapeMismatch, "soft_histogram needs bins >= 1 and hi > lo");
  const S width = (hi - lo) / static_cast<S>(bins);
  const S first = lo + width / 2, last = hi - width / 2;
  const S inv_count = S(1) / static_cast<S>(x.size());
  const Index n = x.size();
  // Per element: lower bin, upper weight, and whether it sits strictly inside the clamp range.
  auto lower = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  auto inside = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(n));
  Tensor<S> h(Shape{bins});
  const S* xp = x.value().data();
  for (Index i = 0; i < n; ++i) {
    const S v = std::clamp(xp[i], first, last);
    (*inside)[static_cast<std::size_t>(i)] = xp[i] > first && xp[i] < last;
    if (bins == 1) {
      (*lower)[static_cast<std::size_t>(i)] = 0;
      h[0] += inv_count;
      continue;
    }
    const S pos = (v - lo) / width - S(0.5);
    const Index b0 = std::min<Index>(static_cast<Index>(std::floor(pos)), bins - 2);
    const S t = pos - static_cast<S>(b0);
    (*lower)[static_cast<std::size_t>(i)] = b0;
    h[b0] += (S(1) - t) * inv_count;
    h[b0 + 1] += t * inv_count;
  }
  return x.graph().record(std::move(h), {x}, [x, lower, inside, bins, width, inv_count](const Tensor<S>& g) {
    Tensor<S> gx(x.shape());
    if (bins > 1) {
      for (Index i = 0; i < x.size(); ++i) {
        if (!(*inside)[static_cast<std::size_t>(i)]) continue;
        const Index b0 = (*lower)[static_cast<std::size_t>(i)];
        gx[i] = (g[b0 + 1] - g[b0]) * inv_count / width;
      }
    }
    x.graph().accumulate(x, std::move(gx));
  });
}

template <typename S>
std::vector<double> hard_histogram(const Tensor<S>& x, Index bins, double lo, double hi) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (Index i = 0; i < x.size(); ++i) {
    const Index b = std::clamp<Index>(static_cast<Index>(std::floor((static_cast<double>(x[i]) - lo) / width)), 0,
                                      bins - 1);
    h[static_cast<std::size_t>(b)] += 1.0;
  }
  for (auto& v : h) v /= static_cast<double>(x.size());
  return h;
}

template <typename S>
Tensor<S> illumination_map(const Tensor<S>& img) {
  require_image("illumination_map", img.shape());
  const Index n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  constexpr Index kTaps = 19;
  const auto taps = gaussian_taps(kTaps, 3.0);
  const Index r = kTaps / 2;
  std::vector<double> peak(static_cast<std::size_t>(h * w)), rows(static_cast<std::size_t>(h * w));
  Tensor<S> out(Shape{n, 1, h, w});
  for (Index b = 0; b < n; ++b) {
    for (Index p = 0; p < h * w; ++p) {
      double m = static_cast<double>(img[(b * c) * h * w + p]);
      for (Index ch = 1; ch < c; ++ch) m = std::max(m, static_cast<double>(img[(b * c + ch) * h * w + p]));
      peak[static_cast<std::size_t>(p)] = m;
    }
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0;
        for (Index k = -r; k <= r; ++k) {
          acc += taps[static_cast<std::size_t>(k + r)] * peak[static_cast<std::size_t>(i * w + mirror(j + k, w))];
        }
        rows[static_cast<std::size_t>(i * w + j)] = acc;
      }
    }
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        double acc = 0;
        for (Index k = -r; k <= r; ++k) {
          acc += taps[static_cast<std::size_t>(k + r)] * rows[static_cast<std::size_t>(mirror(i + k, h) * w + j)];
        }
        out[b * h * w + i * w + j] = static_cast<S>(acc);
      }
    }
  }
  return out;
}

template <typename S>
Var<S> loss_his_retinex(const Var<S>& pred, const Var<S>& target, const Var<S>& low) {
  require_same_shape("loss_his_retinex", pred.shape(), target.shape());
  require_same_shape("loss_his_retinex", pred.shape(), low.shape());
  require_image("loss_his_retinex", pred.shape());
  const S eps = static_cast<S>(kReflectanceEps);
  const S rmax = static_cast<S>(kReflectanceMax);
  // The reflectance of target goes through a non-differentiable illumination estimate, so
  // target is a constant on both paths rather than half differentiated.
  const Var<S> fixed_target = pred.graph().constant(target.value());
  const Var<S> pixel = l1_distance(soft_histogram(pred), soft_histogram(fixed_target));

  const Tensor<S> illum = illumination_map(target.value());
  const Index c = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
  Tensor<S> r_target(target.shape());
  for (Index i = 0; i < r_target.size(); ++i) {
    const Index b = i / (c * hw), p = i % hw;
    r_target[i] = target.value()[i] / (illum[b * hw + p] + eps);
  }
  const Var<S> r_pred = clamp(div(pred, add(low, eps)), S(0), rmax);
  const Var<S> r_tgt = clamp(pred.graph().constant(std::move(r_target)), S(0), rmax);
  const Var<S> reflect = l1_distance(soft_histogram(r_pred, kHistogramBins, S(0), rmax),
                                     soft_histogram(r_tgt, kHistogramBins, S(0), rmax));
  return mul(add(pixel, reflect), S(0.5));
}

template <typename S>
Var<S> loss_ssim(const Var<S>& pred, const Var<S>& target) {
  require_same_shape("loss_ssim", pred.shape(), target.shape());
  require_image("loss_ssim", pred.shape());
  const Index c = pred.dim(1);
  const Index k = std::min<Index>({11, pred.dim(2), pred.dim(3)});
  const auto taps = gaussian_taps(k, 1.5);
  Tensor<S> kernel(Shape{c, 1, k, k});
  for (Index ch = 0; ch < c; ++ch) {
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < k; ++j) {
        kernel[(ch * k + i) * k + j] = static_cast<S>(taps[static_cast<std::size_t>(i)] * taps[static_cast<std::size_t>(j)]);
      }
    }
  }
  Graph<S>& g = pred.graph();
  const Conv2dParams<S> window{g.constant(std::move(kernel)), std::nullopt, 1, 0, c};
  const S c1 = S(1e-4), c2 = S(9e-4);
  const Var<S> mx = conv2d(pred, window), my = conv2d(target, window);
  const Var<S> mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
  const Var<S> sxx = sub(conv2d(square(pred), window), mxx);
  const Var<S> syy = sub(conv2d(square(target), window), myy);
  const Var<S> sxy = sub(conv2d(mul(pred, target), window), mxy);
  const Var<S> num = mul(add(mul(mxy, S(2)), c1), add(mul(sxy, S(2)), c2));
  const Var<S> den = mul(add(add(mxx, myy), c1), add(add(sxx, syy), c2));
  return rsub(S(1), mean(div(num, den)));
}

template <typename S>
PerceptualBank<S> PerceptualBank<S>::make(std::uint64_t seed) {
  const std::vector<ParamSpec> specs{{"stage0", {16, 3, 3, 3}, Init::he_normal, 27},
                                     {"stage1", {32, 16, 3, 3}, Init::he_normal, 144},
                                     {"stage2", {64, 32, 3, 3}, Init::he_normal, 288}};
  const ParamSet<S> set = initialize<S>(specs, seed);
  PerceptualBank bank;
  for (const auto& spec : specs) bank.weights.push_back(set.at(spec.name));
  return bank;
}

template <typename S>
Var<S> loss_perceptual(const Var<S>& pred, const Var<S>& target, const PerceptualBank<S>& bank) {
  require_same_shape("loss_perceptual", pred.shape(), target.shape());
  Graph<S>& g = pred.graph();
  Var<S> fp = pred, ft = target, total;
  for (std::size_t s = 0; s < bank.weights.size(); ++s) {
    const Conv2dParams<S> conv{g.constant(bank.weights[s]), std::nullopt, 2, 1, 1};
    fp = silu(conv2d(fp, conv));
    ft = silu(conv2d(ft, conv));
    const Var<S> term = mean(abs(sub(fp, ft)));
    total = s == 0 ? term : add(total, term);
  }
  return total;
}

template <typename S>
Var<S> loss_tv(const Var<S>& pred) {
  require_image("loss_tv", pred.shape());
  const Index planes = pred.dim(0) * pred.dim(1), h = pred.dim(2), w = pred.dim(3);
  constexpr double kSmooth = 1e-12;
  const double floor_v = std::sqrt(kSmooth);
  const S* x = pred.value().data();
  double total = 0;
  for (Index p = 0; p < planes; ++p) {
    const S* px = x + p * h * w;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        const double dx = j + 1 < w ? double(px[i * w + j + 1]) - double(px[i * w + j]) : 0.0;
        const double dy = i + 1 < h ? double(px[(i + 1) * w + j]) - double(px[i * w + j]) : 0.0;
        total += std::sqrt(dx * dx + dy * dy + kSmooth) - floor_v;
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(planes);
  return pred.graph().record(Tensor<S>::scalar(static_cast<S>(total * scale)), {pred},
                             [pred, planes, h, w, scale](const Tensor<S>& g) {
    const S* x = pred.value().data();
    Tensor<S> gx(pred.shape());
    const double gs = static_cast<double>(g[0]) * scale;
    for (Index p = 0; p < planes; ++p) {
      const S* px = x + p * h * w;
      S* gp = gx.data() + p * h * w;
      for (Index i = 0; i < h; ++i) {
        for (Index j = 0; j < w; ++j) {
          const double dx = j + 1 < w ? double(px[i * w + j + 1]) - double(px[i * w + j]) : 0.0;
          const double dy = i + 1 < h ? double(px[(i + 1) * w + j]) - double(px[i * w + j]) : 0.0;
          const double s = std::sqrt(dx * dx + dy * dy + kSmooth);
          const double gxv = gs * dx / s, gyv = gs * dy / s;
          if (j + 1 < w) gp[i * w + j + 1] += static_cast<S>(gxv);
          if (i + 1 < h) gp[(i + 1) * w + j] += static_cast<S>(gyv);
          gp[i * w + j] -= static_cast<S>(gxv + gyv);
        }
      }
    }
    pred.graph().accumulate(pred, std::move(gx));
  });
}

template <typename S>
Var<S> loss_smooth_l1(const Var<S>& pred, const Var<S>& target) {
  require_same_shape("loss_smooth_l1", pred.shape(), target.shape());
  const auto& d = (pred.value().array() - target.value().array()).eval();
  const auto loss = d.unaryExpr([](S v) { return std::abs(v) < S(1) ? S(0.5) * v * v : std::abs(v) - S(0.5); });
  const S n = static_cast<S>(pred.size());
  return pred.graph().record(Tensor<S>::scalar(loss.sum() / n), {pred, target},
                             [pred, target, d, n](const Tensor<S>& g) {
    typename Tensor<S>::Array slope =
        d.unaryExpr([](S v) { return std::abs(v) < S(1) ? v : (v > 0 ? S(1) : S(-1)); }) * (g[0] / n);
    pred.graph().accumulate(target, Tensor<S>(target.shape(), typename Tensor<S>::Array(-slope)));
    pred.graph().accumulate(pred, Tensor<S>(pred.shape(), std::move(slope)));
  });
}

template <typename S>
Var<S> loss_inner(const Var<S>& pred, const Var<S>& low, bool negate) {
  require_same_shape("loss_inner", pred.shape(), low.shape());
  const S scale = (negate ? S(-1) : S(1)) / static_cast<S>(pred.size());
  return mul(sum(mul(pred, low)), scale);
}

const char* to_string(LossTerm term) {
  switch (term) {
    case LossTerm::ssim:
      return "ssim";
    case LossTerm::perceptual:
      return "perceptual";
    case LossTerm::inner:
      return "inner";
    case LossTerm::his:
      return "his";
    case LossTerm::tv:
      return "tv";
    case LossTerm::smooth:
      return "smooth";
  }
  return "?";
}

double LossWeights::get(LossTerm term) const { return const_cast<LossWeights*>(this)->get(term); }

double& LossWeights::get(LossTerm term) {
  switch (term) {
    case LossTerm::ssim:
      return ssim;
    case LossTerm::perceptual:
      return perceptual;
    case LossTerm::inner:
      return inner;
    case LossTerm::his:
      return his;
    case LossTerm::tv:
      return tv;
    case LossTerm::smooth:
      break;
  }
  return smooth;
}

bool LossToggles::get(LossTerm term) const { return const_cast<LossToggles*>(this)->get(term); }

bool& LossToggles::get(LossTerm term) {
  switch (term) {
    case LossTerm::ssim:
      return ssim;
    case LossTerm::perceptual:
      return perceptual;
    case LossTerm::inner:
      return inner;
    case LossTerm::his:
      return his;
    case LossTerm::tv:
      return tv;
    case LossTerm::smooth:
      break;
  }
  return smooth;
}

template <typename S>
LossBreakdown<S> loss_total(const Var<S>& pred, const Var<S>& target, const Var<S>& low, const LossWeights& w,
                            const LossToggles& toggles, const PerceptualBank<S>& bank) {
  LossBreakdown<S> out;
  bool first = true;
  for (LossTerm term : kLossTerms) {
    if (!toggles.get(term)) continue;
    if (w.get(term) < 0) throw Error(ErrorCode::ConfigError, std::string("negative weight for ") + to_string(term));
    Var<S> value;
    switch (term) {
      case LossTerm::ssim:
        value = loss_ssim(pred, target);
        break;
      case LossTerm::perceptual:
        value = loss_perceptual(pred, target, bank);
        break;
      case LossTerm::inner:
        value = loss_inner(pred, low, toggles.negate_inner);
        break;
      case LossTerm::his:
        value = loss_his_retinex(pred, target, low);
        break;
      case LossTerm::tv:
        value = loss_tv(pred);
        break;
      case LossTerm::smooth:
        value = loss_smooth_l1(pred, target);
        break;
    }
    out.terms.emplace_back(term, static_cast<double>(value.value()[0]));
    const Var<S> weighted = mul(value, static_cast<S>(w.get(term)));
    out.total = first ? weighted : add(out.total, weighted);
    first = false;
  }
  if (first) out.total = pred.graph().constant(Tensor<S>::scalar(S(0)));
  return out;
}

#define DPEC_INSTANTIATE_LOSSES(S)                                                                           \
  template Var<S> soft_histogram(const Var<S>&, Index, S, S);                                                \
  template std::vector<double> hard_histogram(const Tensor<S>&, Index, double, double);                     \
  template Tensor<S> illumination_map(const Tensor<S>&);                                                     \
  template Var<S> loss_his_retinex(const Var<S>&, const Var<S>&, const Var<S>&);                             \
  template Var<S> loss_ssim(const Var<S>&, const Var<S>&);                                                   \
  template struct PerceptualBank<S>;                                                                         \
  template Var<S> loss_perceptual(const Var<S>&, const Var<S>&, const PerceptualBank<S>&);                   \
  template Var<S> loss_tv(const Var<S>&);                                                                    \
  template Var<S> loss_smooth_l1(const Var<S>&, const Var<S>&);                                              \
  template Var<S> loss_inner(const Var<S>&, const Var<S>&, bool);                                            \
  template LossBreakdown<S> loss_total(const Var<S>&, const Var<S>&, const Var<S>&, const LossWeights&,      \
                                       const LossToggles&, const PerceptualBank<S>&);

DPEC_INSTANTIATE_LOSSES(float)
DPEC_INSTANTIATE_LOSSES(double)

}  // namespace dpec
