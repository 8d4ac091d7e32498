#include <doctest.h>

#include <cmath>
#include <iomanip>
#include <random>

#include "dpec/dpec_net.hpp"
#include "support/grad_catalogue.hpp"

using namespace dpec;
using namespace dpec::test;

namespace {

Binder<double>* const no_dn = nullptr;

/// Gradient check over the image and every parameter tensor, the parameters
/// entering the graph through Binder::adopt.
FdReport param_fd_check(const ParamSet<double>& params, const TD& input, int per_input, std::uint64_t seed,
                        const std::function<VD(const VD&, Binder<double>&)>& net) {
  std::vector<std::string> names;
  std::vector<TD> inputs{input};
  for (const auto& [name, t] : params) {
    names.push_back(name);
    inputs.push_back(t);
  }
  return fd_check(
      [&](Graph<double>& g, const std::vector<VD>& v) {
        Binder<double> b(g, params, false);
        for (std::size_t i = 0; i < names.size(); ++i) b.adopt(names[i], v[i + 1]);
        return weighted_sum(net(v[0], b), 17);
      },
      inputs, per_input, seed);
}

TD sliding_min_oracle(const TD& img, Index window) {
  const Index h = img.dim(2), w = img.dim(3), r = window / 2;
  auto mirror = [](Index i, Index n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); };
  TD dark({1, 1, h, w});
  for (Index i = 0; i < h; ++i) {
    for (Index j = 0; j < w; ++j) {
      double m = 1e300;
      for (Index di = -r; di <= r; ++di) {
        for (Index dj = -r; dj <= r; ++dj) {
          const Index y = mirror(i + di, h), x = mirror(j + dj, w);
          for (Index c = 0; c < img.dim(1); ++c) m = std::min(m, std::clamp(img.at({0, c, y, x}), 0.0, 1.0));
        }
      }
      dark.at({0, 0, i, j}) = m;
    }
  }
  return dark;
}

}  // namespace

TEST_CASE("configs: full layout and reduced layout") {
  const ModelConfig full;
  CHECK(full.bee.channels == 96);
  CHECK(full.bee.encoder_blocks == std::array<int, 2>{2, 3});
  CHECK(full.bee.decoder_blocks == std::array<int, 2>{3, 2});
  CHECK(full.denoise.features % full.denoise.frequencies == 0);
  const BeeConfig r = BeeConfig::reduced();
  CHECK(r.channels == 8);
  CHECK(r.encoder_blocks == std::array<int, 2>{1, 1});
  CHECK(r.decoder_blocks == std::array<int, 2>{1, 1});

  DenoiseConfig bad;
  bad.features = 40;
  CHECK(raised([&] { denoise_param_specs(bad); }) == ErrorCode::ConfigError);
  CHECK(parse_enhance_mode("retinex") == EnhanceMode::dpec_retinex);
  CHECK(parse_enhance_mode(to_string(EnhanceMode::dpec)) == EnhanceMode::dpec);
  CHECK(raised([] { parse_enhance_mode("other"); }) == ErrorCode::ConfigError);
}

TEST_CASE("parameter counts grow with each architecture toggle") {
  BeeConfig base;
  base.mff = false;
  const Index plain = count_scalars(bee_param_specs(base));
  const Index with_mff = count_scalars(bee_param_specs(BeeConfig{}));
  const Index dc = count_scalars(denoise_param_specs(DenoiseConfig{}));
  CHECK(plain < with_mff);
  CHECK(dc > 100000);
  CHECK(dc < 300000);
  BeeConfig split;
  split.shared_directions = false;
  CHECK(count_scalars(bee_param_specs(split)) > with_mff);
}

TEST_CASE("vss_block: shape, zero output projection, gradients") {
  const BeeConfig cfg = BeeConfig::reduced();
  const auto specs = vss_block_param_specs("b", 8, cfg);
  std::mt19937_64 rng(1);
  const TD x = random_tensor({1, 4, 4, 8}, -1, 1, rng);
  ParamSet<double> p = initialize<double>(specs, 3);
  {
    Graph<double> g;
    Binder<double> b(g, p, false);
    CHECK(vss_block(g.constant(x), b, "b", cfg).shape() == Shape{1, 4, 4, 8});
  }
  p.at("b.out_proj.weight") = TD({16, 8});
  {
    Graph<double> g;
    Binder<double> b(g, p, false);
    CHECK(vss_block(g.constant(x), b, "b", cfg).value() == x);
  }

  BeeConfig small = cfg;
  small.d_state = 2;
  const ParamSet<double> q = random_params(vss_block_param_specs("b", 4, small), 4, 0.3);
  const FdReport r = param_fd_check(q, random_tensor({1, 3, 4, 4}, -1, 1, rng), 3, 5,
                                    [&](const VD& in, Binder<double>& b) { return vss_block(in, b, "b", small); });
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("bee_forward: output shape equals input shape, including pad and crop") {
  const BeeConfig cfg = BeeConfig::reduced();
  const ParamSet<float> p = initialize<float>(bee_param_specs(cfg), 7);
  std::mt19937_64 rng(2);
  for (auto [h, w] : std::vector<std::pair<Index, Index>>{{64, 64}, {66, 70}, {8, 8}, {5, 3}, {1, 1}}) {
    Graph<float> g;
    Binder<float> b(g, p, false);
    const TF img = random_tensor({2, 3, h, w}, 0, 1, rng).cast<float>();
    const auto out = bee_forward(g.constant(img), b, cfg);
    CHECK(out.shape() == img.shape());
    CHECK(out.value().array().allFinite());
  }
}

TEST_CASE("bee_forward: full network keeps every size in 63..66 squared") {
  const BeeConfig cfg;
  const ParamSet<float> p = initialize<float>(bee_param_specs(cfg), 8);
  std::mt19937_64 rng(3);
  for (Index h = 63; h <= 66; ++h) {
    for (Index w = 63; w <= 66; ++w) {
      Graph<float> g;
      Binder<float> b(g, p, false);
      const TF img = random_tensor({1, 3, h, w}, 0, 1, rng).cast<float>();
      const auto out = bee_forward(g.constant(img), b, cfg);
      CHECK(out.shape() == img.shape());
      CHECK(out.value().array().allFinite());
    }
  }
}

TEST_CASE("bee_forward: deterministic on repeated evaluation") {
  const BeeConfig cfg = BeeConfig::reduced();
  const ParamSet<float> p = initialize<float>(bee_param_specs(cfg), 9);
  std::mt19937_64 rng(4);
  const TF img = random_tensor({1, 3, 24, 16}, 0, 1, rng).cast<float>();
  auto run = [&] {
    Graph<float> g;
    Binder<float> b(g, p, false);
    return bee_forward(g.constant(img), b, cfg).value();
  };
  CHECK(run() == run());
}

TEST_CASE("bee_forward: zero head gives a zero error map and identity enhancement") {
  ModelConfig cfg;
  cfg.bee = BeeConfig::reduced();
  ParamSet<double> p = initialize<double>(bee_param_specs(cfg.bee), 10);
  p.at("head.weight") = TD(p.at("head.weight").shape());
  p.at("head.bias") = TD(p.at("head.bias").shape());
  std::mt19937_64 rng(5);
  const TD img = random_tensor({1, 3, 16, 24}, 0, 1, rng);
  Graph<double> g;
  Binder<double> b(g, p, false);
  CHECK(bee_forward(g.constant(img), b, cfg.bee).value().array().isZero(0));
  CHECK(enhance(g.constant(img), b, no_dn, cfg, EnhanceMode::dpec, 1).value() == img);
  const TD half = enhance(g.constant(img), b, no_dn, cfg, EnhanceMode::dpec_retinex, 1).value();
  CHECK(max_abs_diff(half, TD(img.shape(), img.array() * 0.5)) == 0.0);
}

TEST_CASE("bee_forward: end-to-end gradients on the reduced network") {
  BeeConfig cfg = BeeConfig::reduced();
  const ParamSet<double> p = random_params(bee_param_specs(cfg), 11, 0.2);
  std::mt19937_64 rng(6);
  const FdReport r = param_fd_check(p, random_tensor({1, 3, 8, 8}, 0, 1, rng), 1, 12,
                                    [&](const VD& in, Binder<double>& b) { return bee_forward(in, b, cfg); });
  CHECK(r.checked > 60);
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("brighten: endpoints, midpoint and monotonicity") {
  Graph<double> g;
  const TD x({5}, {0, 0.25, 0.5, 0.75, 1});
  const TD y = brighten(g.constant(x)).value();
  CHECK(y[0] == 0);
  CHECK(y[4] == 1);
  CHECK(y[2] == doctest::Approx(0.757858283).epsilon(1e-9));
  for (Index i = 1; i < 5; ++i) CHECK(y[i] > y[i - 1]);
  CHECK(brighten(g.constant(TD({2}, {-0.5, 1.5}))).value() == TD({2}, {0, 1}));
}

TEST_CASE("dct2d_8x8: DC of constants, round trip, Parseval, basis") {
  std::mt19937_64 rng(7);
  const TD dc = dct2d_8x8(TD({8, 8}, 0.3));
  CHECK(dc[0] == doctest::Approx(8 * 0.3).epsilon(1e-14));
  for (Index i = 1; i < 64; ++i) CHECK(std::abs(dc[i]) < 1e-14);

  for (int trial = 0; trial < 10; ++trial) {
    const TD x = random_tensor({8, 8}, -1, 1, rng);
    const TD c = dct2d_8x8(x);
    CHECK(max_abs_diff(idct2d_8x8(c), x) < 1e-10);
    CHECK(std::abs(c.array().matrix().norm() - x.array().matrix().norm()) < 1e-10);
  }

  for (Index u = 0; u < 8; ++u) {
    for (Index v = 0; v < 8; ++v) {
      TD unit({8, 8});
      unit.at({u, v}) = 1;
      CHECK(max_abs_diff(idct2d_8x8(unit), dct_basis<double>(u, v)) < 1e-14);
    }
  }
  CHECK(raised([] { dct2d_8x8(TD({4, 4})); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("zigzag_frequencies: JPEG order") {
  const auto z = zigzag_frequencies(10);
  const std::vector<std::array<Index, 2>> expect{{0, 0}, {0, 1}, {1, 0}, {2, 0}, {1, 1},
                                                 {0, 2}, {0, 3}, {1, 2}, {2, 1}, {3, 0}};
  CHECK(z == expect);
  CHECK(zigzag_frequencies(64).back() == std::array<Index, 2>{7, 7});
}

TEST_CASE("mca: weights in (0,1), zero input, brute-force recomputation") {
  DenoiseConfig cfg;
  cfg.features = 16;
  const auto specs = denoise_param_specs(cfg);
  const ParamSet<double> p = random_params(specs, 13, 0.5);
  std::mt19937_64 rng(8);
  Graph<double> g;
  Binder<double> b(g, p, false);
  CHECK(mca(g.constant(TD({1, 16, 8, 8})), b, "mca", cfg).value().array().isZero(0));

  const auto freqs = zigzag_frequencies(16);
  for (double scale : {1.0, 2.5}) {
    const TD x = random_tensor({2, 16, 8, 8}, 0.1, 1, rng);
    const TD xs(x.shape(), x.array() * scale);
    const TD y = mca(g.constant(xs), b, "mca", cfg).value();
    const TD& w1 = p.at("mca.fc1.weight");
    const TD& b1 = p.at("mca.fc1.bias");
    const TD& w2 = p.at("mca.fc2.weight");
    const TD& b2 = p.at("mca.fc2.bias");
    for (Index n = 0; n < 2; ++n) {
      std::vector<double> stat(16), hidden(4), weight(16);
      for (Index c = 0; c < 16; ++c) {
        const TD basis = dct_basis<double>(freqs[c][0], freqs[c][1]);
        for (Index i = 0; i < 8; ++i) {
          for (Index j = 0; j < 8; ++j) stat[c] += xs.at({n, c, i, j}) * basis.at({i, j});
        }
      }
      for (Index k = 0; k < 4; ++k) {
        double s = b1[k];
        for (Index c = 0; c < 16; ++c) s += stat[c] * w1.at({c, k});
        hidden[k] = std::max(0.0, s);
      }
      for (Index c = 0; c < 16; ++c) {
        double s = b2[c];
        for (Index k = 0; k < 4; ++k) s += hidden[k] * w2.at({k, c});
        weight[c] = 1 / (1 + std::exp(-s));
        CHECK(weight[c] > 0);
        CHECK(weight[c] < 1);
        for (Index i = 0; i < 8; ++i) {
          for (Index j = 0; j < 8; ++j) {
            CHECK(std::abs(y.at({n, c, i, j}) - xs.at({n, c, i, j}) * weight[c]) < 1e-12);
          }
        }
      }
    }
  }
  CHECK(raised([&] { mca(g.constant(TD({1, 12, 8, 8})), b, "mca", cfg); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("dark_channel_refine: gray image, zero channel, sliding-min oracle") {
  Graph<double> g;
  const TD gray({1, 3, 9, 9}, 0.6);
  CHECK(max_abs_diff(dark_channel_refine(g.constant(gray)).value(), TD(gray.shape(), 0.9 * 0.6)) < 1e-15);

  std::mt19937_64 rng(9);
  TD zero_ch = random_tensor({1, 3, 10, 8}, 0, 1, rng);
  for (Index i = 0; i < 80; ++i) zero_ch[80 + i] = 0;
  CHECK(dark_channel_refine(g.constant(zero_ch)).value() == zero_ch);

  const TD small = random_tensor({1, 3, 3, 3}, -0.1, 1.1, rng);
  const TD out = dark_channel_refine(g.constant(small), 3, 0.1).value();
  const TD dark = sliding_min_oracle(small, 3);
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < 3; ++i) {
      for (Index j = 0; j < 3; ++j) {
        const double expect = std::clamp(std::clamp(small.at({0, c, i, j}), 0.0, 1.0) - 0.1 * dark.at({0, 0, i, j}), 0.0, 1.0);
        CHECK(out.at({0, c, i, j}) == doctest::Approx(expect).epsilon(1e-15));
      }
    }
  }

  const TD big = random_tensor({1, 3, 12, 11}, 0, 1, rng);
  const TD out7 = dark_channel_refine(g.constant(big)).value();
  const TD dark7 = sliding_min_oracle(big, 7);
  for (Index i = 0; i < 12; ++i) {
    for (Index j = 0; j < 11; ++j) {
      CHECK(out7.at({0, 1, i, j}) == doctest::Approx(std::clamp(big.at({0, 1, i, j}) - 0.1 * dark7.at({0, 0, i, j}), 0.0, 1.0)));
    }
  }
}

TEST_CASE("denoise_forward: shape, zero output conv, gradients") {
  DenoiseConfig cfg;
  cfg.features = 16;
  cfg.blocks = 2;
  std::mt19937_64 rng(10);
  const TD img = random_tensor({1, 3, 12, 10}, 0, 1, rng);
  ParamSet<double> p = initialize<double>(denoise_param_specs(cfg), 14);
  {
    Graph<double> g;
    Binder<double> b(g, p, false);
    const TD y = denoise_forward(g.constant(img), b, cfg).value();
    CHECK(y.shape() == img.shape());
    CHECK(y == dark_channel_refine(g.constant(img)).value());
  }
  p.at("out.weight") = random_tensor(p.at("out.weight").shape(), -0.05, 0.05, rng);
  {
    Graph<double> g;
    Binder<double> b(g, p, false);
    const TD y = denoise_forward(g.constant(img), b, cfg).value();
    CHECK_FALSE(y == dark_channel_refine(g.constant(img)).value());
    CHECK(y.array().minCoeff() >= 0);
    CHECK(y.array().maxCoeff() <= 1);
  }

  DenoiseConfig tiny;
  tiny.features = 8;
  tiny.blocks = 2;
  tiny.frequencies = 8;
  ParamSet<double> q = random_params(denoise_param_specs(tiny), 15, 0.2);
  const FdReport r = param_fd_check(q, random_tensor({1, 3, 8, 8}, 0.25, 0.75, rng), 2, 16,
                                    [&](const VD& in, Binder<double>& b) { return denoise_forward(in, b, tiny); });
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("enhance: stage and mode semantics") {
  ModelConfig cfg;
  cfg.bee = BeeConfig::reduced();
  cfg.denoise.features = 16;
  cfg.denoise.blocks = 1;
  const ParamSet<double> bee = initialize<double>(bee_param_specs(cfg.bee), 20);
  ParamSet<double> bee_zero = bee;
  bee_zero.at("head.weight") = TD(bee.at("head.weight").shape());
  bee_zero.at("head.bias") = TD(bee.at("head.bias").shape());
  const ParamSet<double> dn = random_params(denoise_param_specs(cfg.denoise), 21, 0.05);
  std::mt19937_64 rng(11);
  const TD img = random_tensor({1, 3, 16, 16}, 0, 1, rng);

  Graph<double> g;
  Binder<double> b(g, bee, false), bz(g, bee_zero, false), d(g, dn, false);
  const VD x = g.constant(img);
  CHECK(enhance(x, bz, &d, cfg, EnhanceMode::dpec, 2).value() == denoise_forward(x, d, cfg.denoise).value());
  CHECK(raised([&] { enhance(x, b, no_dn, cfg, EnhanceMode::dpec, 2); }) == ErrorCode::MissingDenoiser);
  CHECK(raised([&] { enhance(x, b, &d, cfg, EnhanceMode::dpec, 3); }) == ErrorCode::ConfigError);

  // Stage 1 DPEC is the clamp of input + error, bit for bit.
  const TD e = bee_forward(x, b, cfg.bee).value();
  const TD s1 = enhance(x, b, no_dn, cfg, EnhanceMode::dpec, 1).value();
  CHECK(fuse(x, g.constant(e), EnhanceMode::dpec).value() == TD(img.shape(), img.array() + e.array()));
  CHECK(s1 == TD(img.shape(), (img.array() + e.array()).max(0.0).min(1.0)));
  const TD r1 = enhance(x, b, no_dn, cfg, EnhanceMode::dpec_retinex, 1).value();
  CHECK(max_abs_diff(r1, TD(img.shape(), (img.array() / (1 + (-e.array()).exp())).max(0.0).min(1.0))) < 1e-15);
}

TEST_CASE("enhance: a frozen BEE receives no adjoints in stage 2") {
  ModelConfig cfg;
  cfg.bee = BeeConfig::reduced();
  cfg.denoise.features = 16;
  cfg.denoise.blocks = 1;
  const ParamSet<double> bee = initialize<double>(bee_param_specs(cfg.bee), 22);
  const ParamSet<double> dn = random_params(denoise_param_specs(cfg.denoise), 23, 0.05);
  std::mt19937_64 rng(12);
  Graph<double> g;
  Binder<double> b(g, bee, false), d(g, dn, true);
  const VD x = g.constant(random_tensor({1, 3, 16, 16}, 0, 1, rng));
  const VD y = fuse(denoise_forward(x, d, cfg.denoise), bee_forward(x, b, cfg.bee), EnhanceMode::dpec);
  g.backward(mean(square(y)));
  for (const auto& [name, v] : b.bound()) {
    CAPTURE(name);
    CHECK_FALSE(v.requires_grad());
    CHECK(g.grad(v).array().isZero(0));
  }
  bool any = false;
  for (const auto& [name, v] : d.bound()) any = any || !g.grad(v).array().isZero(0);
  CHECK(any);
}

TEST_CASE("enhance: mode/stage snapshot") {
  ModelConfig cfg;
  cfg.bee = BeeConfig::reduced();
  cfg.denoise.features = 16;
  cfg.denoise.blocks = 2;
  const ParamSet<double> bee = initialize<double>(bee_param_specs(cfg.bee), 30);
  const ParamSet<double> dn = random_params(denoise_param_specs(cfg.denoise), 31, 0.05);
  std::mt19937_64 rng(32);
  const TD img = random_tensor({1, 3, 16, 16}, 0, 0.4, rng);
  Graph<double> g;
  Binder<double> b(g, bee, false), d(g, dn, false);
  const VD x = g.constant(img);

  struct Row {
    EnhanceMode mode;
    int stage;
    double sum, first, last;
  };
  // Recorded from the first verified run of this configuration.
  const Row golden[] = {
      {EnhanceMode::dpec, 1, 219.35759139374161, 0.25287105381903607, 0.33775408669623797},
      {EnhanceMode::dpec, 2, 228.35334063002728, 0.30655905742741668, 0.33580666213323535},
      {EnhanceMode::dpec_retinex, 1, 79.772846375782137, 0.17395405147165705, 0.15773338971003048},
      {EnhanceMode::dpec_retinex, 2, 84.595193446574328, 0.19923565122928308, 0.15674682690837796},
  };
  std::vector<TD> outs;
  for (const Row& row : golden) {
    const TD y = enhance(x, b, &d, cfg, row.mode, row.stage).value();
    INFO(std::string(to_string(row.mode)) << " stage " << row.stage << ": " << std::setprecision(17) << y.array().sum() << ", "
                                << y[0] << ", " << y[y.size() - 1]);
    CHECK(y.array().sum() == doctest::Approx(row.sum).epsilon(1e-12));
    CHECK(y[0] == doctest::Approx(row.first).epsilon(1e-12));
    CHECK(y[y.size() - 1] == doctest::Approx(row.last).epsilon(1e-12));
    for (const TD& o : outs) CHECK_FALSE(o == y);
    outs.push_back(y);
  }
}
