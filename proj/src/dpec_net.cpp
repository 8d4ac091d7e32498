#include "dpec/dpec_net.hpp"

#include <cmath>
#include <numbers>

namespace dpec {

const char* to_string(EnhanceMode mode) {
  switch (mode) {
    case EnhanceMode::dpec:
      return "dpec";
    case EnhanceMode::dpec_retinex:
      return "dpec-retinex";
  }
  return "?";
}

EnhanceMode parse_enhance_mode(const std::string& text) {
  if (text == "dpec") return EnhanceMode::dpec;
  if (text == "dpec-retinex" || text == "dpec_retinex" || text == "retinex") return EnhanceMode::dpec_retinex;
  throw Error(ErrorCode::ConfigError, "unknown enhance mode '" + text + "'");
}

BeeConfig BeeConfig::reduced() {
  BeeConfig cfg;
  cfg.channels = 8;
  cfg.encoder_blocks = {1, 1};
  cfg.decoder_blocks = {1, 1};
  cfg.d_state = 4;
  return cfg;
}

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& name, Index in, Index features, bool bias) {
  out.push_back({name + ".weight", {in, features}, Init::fan_in_uniform, in});
  if (bias) out.push_back({name + ".bias", {features}, Init::zeros, in});
}

void add_conv(std::vector<ParamSpec>& out, const std::string& name, Index cout, Index cin, Index k,
              Init init = Init::fan_in_uniform) {
  out.push_back({name + ".weight", {cout, cin, k, k}, init, cin * k * k});
  out.push_back({name + ".bias", {cout}, Init::zeros, cin * k * k});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& name, Index dim) {
  out.push_back({name + ".gamma", {dim}, Init::ones, dim});
  out.push_back({name + ".beta", {dim}, Init::zeros, dim});
}

void append(std::vector<ParamSpec>& out, const std::vector<ParamSpec>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

std::string block_name(const std::string& stage, int i) { return stage + ".block" + std::to_string(i); }

template <typename S>
LayerNormParams<S> norm_params(Binder<S>& p, const std::string& name) {
  return {p(name + ".gamma"), p(name + ".beta")};
}

template <typename S>
LinearParams<S> linear_params(Binder<S>& p, const std::string& name, bool bias) {
  LinearParams<S> out{p(name + ".weight"), std::nullopt};
  if (bias) out.bias = p(name + ".bias");
  return out;
}

template <typename S>
Conv2dParams<S> conv_params(Binder<S>& p, const std::string& name, Index stride, Index padding) {
  return {p(name + ".weight"), p(name + ".bias"), stride, padding, 1};
}

// Mirror padding of one of the last two axes (rows when `cols` is false). Pads
// larger than the axis reflect repeatedly; a single-sample axis has nothing to
// reflect and is replicated.
template <typename S>
Var<S> reflect_axis(Var<S> x, bool cols, Index before, Index after) {
  const Index axis = x.value().rank() - (cols ? 1 : 2);
  if (x.dim(axis) == 1 && before + after > 0) {
    return index_select(x, axis, std::vector<Index>(static_cast<std::size_t>(1 + before + after), 0));
  }
  while (before > 0 || after > 0) {
    const Index n = x.dim(axis);
    const Index pb = std::min(before, n - 1), pa = std::min(after, n - 1);
    x = cols ? reflect_pad2d(x, 0, 0, pb, pa) : reflect_pad2d(x, pb, pa, 0, 0);
    before -= pb;
    after -= pa;
  }
  return x;
}

template <typename S>
Var<S> pad_bottom_right(const Var<S>& x, Index bottom, Index right) {
  return reflect_axis(reflect_axis(x, false, 0, bottom), true, 0, right);
}

template <typename S>
Var<S> pad_symmetric(const Var<S>& x, Index r) {
  return reflect_axis(reflect_axis(x, false, r, r), true, r, r);
}

std::string ss2d_set_name(const std::string& prefix, const BeeConfig& cfg, int k) {
  return prefix + ".ss2d." + (cfg.shared_directions ? std::string("shared") : "dir" + std::to_string(k));
}

}  // namespace

std::vector<ParamSpec> vss_block_param_specs(const std::string& prefix, Index dim, const BeeConfig& cfg) {
  const Index e = cfg.ssm_expand * dim;
  const Index r = default_dt_rank(e);
  const Index n = cfg.d_state;
  std::vector<ParamSpec> out;
  add_norm(out, prefix + ".norm", dim);
  add_linear(out, prefix + ".gate_proj", dim, e, true);
  add_linear(out, prefix + ".in_proj", dim, e, true);
  add_conv(out, prefix + ".dwconv", e, 1, 3);
  const int sets = cfg.shared_directions ? 1 : 4;
  for (int k = 0; k < sets; ++k) {
    const std::string s = ss2d_set_name(prefix, cfg, k);
    add_linear(out, s + ".x_proj", e, r + 2 * n, false);
    out.push_back({s + ".dt_proj.weight", {r, e}, Init::fan_in_uniform, r});
    out.push_back({s + ".dt_proj.bias", {e}, Init::ssm_dt_bias, r});
    out.push_back({s + ".A_log", {e, n}, Init::ssm_a_log, 1});
    out.push_back({s + ".D", {e}, Init::ones, 1});
  }
  add_norm(out, prefix + ".ss2d.norm", e);
  add_linear(out, prefix + ".out_proj", e, dim, false);
  return out;
}

std::vector<ParamSpec> bee_param_specs(const BeeConfig& cfg) {
  const Index c = cfg.channels;
  std::vector<ParamSpec> out;
  add_conv(out, "embed.conv", c, 3, 4);
  add_norm(out, "embed.norm", c);
  for (int i = 0; i < cfg.encoder_blocks[0]; ++i) append(out, vss_block_param_specs(block_name("enc0", i), c, cfg));
  add_norm(out, "merge.norm", 4 * c);
  add_linear(out, "merge.reduce", 4 * c, 2 * c, false);
  for (int i = 0; i < cfg.encoder_blocks[1]; ++i) {
    append(out, vss_block_param_specs(block_name("enc1", i), 2 * c, cfg));
  }
  for (int i = 0; i < cfg.decoder_blocks[0]; ++i) {
    append(out, vss_block_param_specs(block_name("dec0", i), 2 * c, cfg));
  }
  add_linear(out, "dec0.expand", 2 * c, 4 * c, false);
  for (int i = 0; i < cfg.decoder_blocks[1]; ++i) append(out, vss_block_param_specs(block_name("dec1", i), c, cfg));
  if (cfg.mff) {
    add_conv(out, "mff.down", 2 * c, c, 3);
    add_conv(out, "mff.up", c, 2 * c, 3);
  }
  add_linear(out, "final.expand", c, 16 * c, false);
  add_linear(out, "head", c, 3, true);
  return out;
}

std::vector<ParamSpec> denoise_param_specs(const DenoiseConfig& cfg) {
  const Index f = cfg.features;
  if (cfg.frequencies < 1 || f % cfg.frequencies != 0 || f < 4) {
    throw Error(ErrorCode::ConfigError, "denoiser features " + std::to_string(f) +
                                            " must be >= 4 and divisible by frequencies " +
                                            std::to_string(cfg.frequencies));
  }
  std::vector<ParamSpec> out;
  add_conv(out, "pre", f, 6, 3);
  for (int k = 0; k < cfg.blocks; ++k) add_conv(out, "block" + std::to_string(k), f, f, 3);
  add_linear(out, "mca.fc1", f, f / 4, true);
  add_linear(out, "mca.fc2", f / 4, f, true);
  // Zero output conv: an untrained denoiser starts as the dark-channel refinement of its input.
  add_conv(out, "out", 3, f, 3, Init::zeros);
  return out;
}

template <typename S>
Var<S> vss_block(const Var<S>& x, Binder<S>& params, const std::string& prefix, const BeeConfig& cfg) {
  if (x.value().rank() != 4) throw Error(ErrorCode::ShapeMismatch, "vss_block of " + shape_str(x.shape()));
  const Index d = x.dim(3);
  const Index e = cfg.ssm_expand * d;
  const Var<S> h = layernorm(x, norm_params(params, prefix + ".norm"));
  const Var<S> gate = silu(linear(h, linear_params(params, prefix + ".gate_proj", true)));

  Var<S> path = linear(h, linear_params(params, prefix + ".in_proj", true));
  path = to_nhwc(depthwise_conv2d(to_nchw(path), params(prefix + ".dwconv.weight"),
                                  std::optional<Var<S>>(params(prefix + ".dwconv.bias"))));
  path = silu(path);

  std::vector<S6Params<S>> sets;
  for (int k = 0; k < (cfg.shared_directions ? 1 : 4); ++k) {
    const std::string s = ss2d_set_name(prefix, cfg, k);
    S6Params<S> p;
    p.a_log = params(s + ".A_log");
    p.d_skip = params(s + ".D");
    p.x_proj = linear_params(params, s + ".x_proj", false);
    p.dt_proj = linear_params(params, s + ".dt_proj", true);
    p.dt_rank = default_dt_rank(e);
    p.d_state = cfg.d_state;
    sets.push_back(std::move(p));
  }
  path = ss2d_apply(path, std::span<const S6Params<S>>(sets), norm_params(params, prefix + ".ss2d.norm"));
  return add(x, linear(mul(gate, path), linear_params(params, prefix + ".out_proj", false)));
}

template <typename S>
Var<S> bee_forward(const Var<S>& img, Binder<S>& params, const BeeConfig& cfg) {
  if (img.value().rank() != 4 || img.dim(1) != 3) {
    throw Error(ErrorCode::ShapeMismatch, "bee_forward expects [N,3,H,W], got " + shape_str(img.shape()));
  }
  const Index h = img.dim(2), w = img.dim(3);
  const Index ph = (8 - h % 8) % 8, pw = (8 - w % 8) % 8;
  const Var<S> x = pad_bottom_right(img, ph, pw);

  const Var<S> d1 = patch_embed(x, conv_params(params, "embed.conv", 4, 0), norm_params(params, "embed.norm"));
  Var<S> e1 = d1;
  for (int i = 0; i < cfg.encoder_blocks[0]; ++i) e1 = vss_block(e1, params, block_name("enc0", i), cfg);
  Var<S> d2 = patch_merge(e1, norm_params(params, "merge.norm"), linear_params(params, "merge.reduce", false));
  for (int i = 0; i < cfg.encoder_blocks[1]; ++i) d2 = vss_block(d2, params, block_name("enc1", i), cfg);

  Var<S> u = d2;
  if (cfg.mff) {
    // m1: the finer encoder features brought down to the bottleneck scale.
    const Var<S> m1 = to_nhwc(conv2d(to_nchw(e1), conv_params(params, "mff.down", 2, 1)));
    u = add(u, m1);
  }
  for (int i = 0; i < cfg.decoder_blocks[0]; ++i) u = vss_block(u, params, block_name("dec0", i), cfg);
  u = add(patch_expand(u, linear_params(params, "dec0.expand", false), 2), e1);
  for (int i = 0; i < cfg.decoder_blocks[1]; ++i) u = vss_block(u, params, block_name("dec1", i), cfg);
  if (cfg.mff) {
    const Var<S> m2 = to_nhwc(conv2d(upsample_nearest2x(to_nchw(d2)), conv_params(params, "mff.up", 1, 1)));
    u = add(u, m2);
  }

  Var<S> out = patch_expand(u, linear_params(params, "final.expand", false), 4);
  out = to_nchw(linear(out, linear_params(params, "head", true)));
  if (ph == 0 && pw == 0) return out;
  return crop2d(out, 0, 0, h, w);
}

template <typename S>
Var<S> brighten(const Var<S>& img, S gamma) {
  return pow(clamp(img, S(0), S(1)), gamma);
}

namespace {

// c[u][k] of the orthonormal 8-point DCT-II.
double dct_coeff(Index u, Index k) {
  const double scale = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
  return scale * std::cos(std::numbers::pi * static_cast<double>((2 * k + 1) * u) / 16.0);
}

Eigen::Matrix<double, 8, 8> dct_matrix() {
  Eigen::Matrix<double, 8, 8> m;
  for (Index u = 0; u < 8; ++u) {
    for (Index k = 0; k < 8; ++k) m(u, k) = dct_coeff(u, k);
  }
  return m;
}

template <typename S>
Eigen::Matrix<double, 8, 8> block_matrix(const Tensor<S>& t) {
  if (t.shape() != Shape{8, 8}) throw Error(ErrorCode::ShapeMismatch, "expected an 8x8 block, got " + shape_str(t.shape()));
  Eigen::Matrix<double, 8, 8> m;
  for (Index r = 0; r < 8; ++r) {
    for (Index c = 0; c < 8; ++c) m(r, c) = static_cast<double>(t[r * 8 + c]);
  }
  return m;
}

template <typename S>
Tensor<S> block_tensor(const Eigen::Matrix<double, 8, 8>& m) {
  Tensor<S> t(Shape{8, 8});
  for (Index r = 0; r < 8; ++r) {
    for (Index c = 0; c < 8; ++c) t[r * 8 + c] = static_cast<S>(m(r, c));
  }
  return t;
}

}  // namespace

template <typename S>
Tensor<S> dct2d_8x8(const Tensor<S>& block) {
  const auto m = dct_matrix();
  return block_tensor<S>(m * block_matrix(block) * m.transpose());
}

template <typename S>
Tensor<S> idct2d_8x8(const Tensor<S>& coeffs) {
  const auto m = dct_matrix();
  return block_tensor<S>(m.transpose() * block_matrix(coeffs) * m);
}

std::vector<std::array<Index, 2>> zigzag_frequencies(Index count) {
  if (count < 0 || count > 64) throw Error(ErrorCode::ShapeMismatch, "zig-zag count must be in [0, 64]");
  std::vector<std::array<Index, 2>> out;
  for (Index s = 0; s <= 14 && static_cast<Index>(out.size()) < count; ++s) {
    // Even anti-diagonals run bottom-left to top-right, odd ones the other way.
    const Index lo = std::max<Index>(0, s - 7), hi = std::min<Index>(s, 7);
    for (Index i = lo; i <= hi && static_cast<Index>(out.size()) < count; ++i) {
      const Index row = s % 2 == 0 ? s - i : i;
      out.push_back({row, s - row});
    }
  }
  return out;
}

template <typename S>
Tensor<S> dct_basis(Index u, Index v) {
  Tensor<S> t(Shape{8, 8});
  for (Index r = 0; r < 8; ++r) {
    for (Index c = 0; c < 8; ++c) t[r * 8 + c] = static_cast<S>(dct_coeff(u, r) * dct_coeff(v, c));
  }
  return t;
}

template <typename S>
Var<S> mca(const Var<S>& x, Binder<S>& params, const std::string& prefix, const DenoiseConfig& cfg) {
  if (x.value().rank() != 4) throw Error(ErrorCode::ShapeMismatch, "mca of " + shape_str(x.shape()));
  const Index n = x.dim(0), f = x.dim(1);
  if (cfg.frequencies < 1 || f % cfg.frequencies != 0) {
    throw Error(ErrorCode::ShapeMismatch, "mca channels " + std::to_string(f) + " not divisible by " +
                                              std::to_string(cfg.frequencies) + " frequency groups");
  }
  const auto freqs = zigzag_frequencies(cfg.frequencies);
  const Index group = f / cfg.frequencies;
  Tensor<S> basis(Shape{n, f, 8, 8});
  for (Index c = 0; c < f; ++c) {
    const auto [u, v] = freqs[static_cast<std::size_t>(c / group)];
    const Tensor<S> b = dct_basis<S>(u, v);
    for (Index i = 0; i < n; ++i) basis.array().segment((i * f + c) * 64, 64) = b.array();
  }
  const Var<S> pooled = adaptive_avg_pool2d(x, 8, 8);
  const Var<S> stat = sum(mul(pooled, x.graph().constant(std::move(basis))), {2, 3});
  const Var<S> hidden = relu(linear(stat, linear_params(params, prefix + ".fc1", true)));
  const Var<S> weights = sigmoid(linear(hidden, linear_params(params, prefix + ".fc2", true)));
  return mul_channels(x, weights);
}

template <typename S>
Var<S> dark_channel_refine(const Var<S>& img, Index window, S omega) {
  if (img.value().rank() != 4) throw Error(ErrorCode::ShapeMismatch, "dark_channel_refine of " + shape_str(img.shape()));
  if (window < 1 || window % 2 == 0) throw Error(ErrorCode::ShapeMismatch, "dark-channel window must be odd");
  const Index n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  const Var<S> x = clamp(img, S(0), S(1));
  const Var<S> cmin = reshape(reduce(Reduce::min, x, {1}), Shape{n, 1, h, w});
  const Var<S> dark = min_pool2d(pad_symmetric(cmin, window / 2), window);
  const Var<S> spread = index_select(dark, 1, std::vector<Index>(static_cast<std::size_t>(c), 0));
  return clamp(sub(x, mul(spread, omega)), S(0), S(1));
}

template <typename S>
Var<S> denoise_forward(const Var<S>& img, Binder<S>& params, const DenoiseConfig& cfg) {
  if (img.value().rank() != 4 || img.dim(1) != 3) {
    throw Error(ErrorCode::ShapeMismatch, "denoise_forward expects [N,3,H,W], got " + shape_str(img.shape()));
  }
  const Var<S> x = clamp(img, S(0), S(1));
  const Var<S> r = conv2d(concat<S>({x, brighten(x, static_cast<S>(cfg.gamma))}, 1), conv_params(params, "pre", 1, 1));
  Var<S> f = r;
  for (int k = 0; k < cfg.blocks; ++k) f = silu(conv2d(f, conv_params(params, "block" + std::to_string(k), 1, 1)));
  f = add(mca(f, params, "mca", cfg), r);
  const Var<S> out = add(conv2d(f, conv_params(params, "out", 1, 1)), x);
  return dark_channel_refine(out, cfg.dark_window, static_cast<S>(cfg.omega));
}

template <typename S>
Var<S> fuse(const Var<S>& base, const Var<S>& error, EnhanceMode mode) {
  switch (mode) {
    case EnhanceMode::dpec:
      return add(base, error);
    case EnhanceMode::dpec_retinex:
      return mul(base, sigmoid(error));
  }
  throw Error(ErrorCode::ConfigError, "unknown enhance mode");
}

template <typename S>
Var<S> enhance(const Var<S>& img, Binder<S>& bee, Binder<S>* denoiser, const ModelConfig& cfg,
               EnhanceMode mode, int stage) {
  if (stage != 1 && stage != 2) throw Error(ErrorCode::ConfigError, "stage must be 1 or 2");
  if (stage == 2 && denoiser == nullptr) throw Error(ErrorCode::MissingDenoiser, "stage 2 needs denoiser parameters");
  const Var<S> error = bee_forward(img, bee, cfg.bee);
  const Var<S> base = stage == 1 ? img : denoise_forward(img, *denoiser, cfg.denoise);
  return clamp(fuse(base, error, mode), S(0), S(1));
}

#define DPEC_INSTANTIATE_NET(S)                                                                         \
  template Var<S> vss_block(const Var<S>&, Binder<S>&, const std::string&, const BeeConfig&);          \
  template Var<S> bee_forward(const Var<S>&, Binder<S>&, const BeeConfig&);                             \
  template Var<S> brighten(const Var<S>&, S);                                                           \
  template Tensor<S> dct2d_8x8(const Tensor<S>&);                                                       \
  template Tensor<S> idct2d_8x8(const Tensor<S>&);                                                      \
  template Tensor<S> dct_basis(Index, Index);                                                           \
  template Var<S> mca(const Var<S>&, Binder<S>&, const std::string&, const DenoiseConfig&);            \
  template Var<S> dark_channel_refine(const Var<S>&, Index, S);                                         \
  template Var<S> denoise_forward(const Var<S>&, Binder<S>&, const DenoiseConfig&);                     \
  template Var<S> fuse(const Var<S>&, const Var<S>&, EnhanceMode);                                      \
  template Var<S> enhance(const Var<S>&, Binder<S>&, Binder<S>*, const ModelConfig&, EnhanceMode, int);

DPEC_INSTANTIATE_NET(float)
DPEC_INSTANTIATE_NET(double)

}  // namespace dpec
