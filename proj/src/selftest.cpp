#include "dpec/selftest.hpp"

#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <random>

#include "dpec/checkpoint.hpp"
#include "dpec/gradcheck.hpp"

namespace dpec {

namespace {

using TD = Tensor<double>;
using VD = Var<double>;

TD uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  TD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

// Weighted sum with fixed random weights, so every output element matters.
VD probe_sum(const VD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.graph().constant(uniform(y.shape(), -1, 1, rng))));
}

class Suite {
 public:
  explicit Suite(std::string name) { result_.name = std::move(name); }

  void check(const std::string& label, const std::function<bool(std::string&)>& body) {
    result_.total += 1;
    std::string detail;
    try {
      if (body(detail)) {
        result_.passed += 1;
        return;
      }
    } catch (const std::exception& e) {
      detail = std::string("threw: ") + e.what();
    }
    result_.failures.push_back(label + (detail.empty() ? "" : " (" + detail + ")"));
  }

  SuiteResult done() { return std::move(result_); }

 private:
  SuiteResult result_;
};

// Histogram losses are piecewise linear; their checks use tolerance 1e-3 and a
// smaller step so a probe rarely straddles a kink.
bool grad_ok(const ScalarFn& f, const std::vector<TD>& inputs, double tol, std::string& detail) {
  const GradcheckResult r = gradcheck(f, inputs, 12, 7, tol > 1e-4 ? 1e-6 : 1e-5);
  detail = "max rel error " + std::to_string(r.max_rel_error);
  return r.max_rel_error < tol;
}

SuiteResult gradient_suite() {
  Suite s("gradients");
  std::mt19937_64 rng(11);
  s.check("conv2d", [&](std::string& d) {
    return grad_ok(
        [](Graph<double>&, const std::vector<VD>& v) {
          return probe_sum(conv2d(v[0], Conv2dParams<double>{v[1], v[2], 1, 1, 1}), 1);
        },
        {uniform({1, 2, 5, 5}, -1, 1, rng), uniform({3, 2, 3, 3}, -1, 1, rng), uniform({3}, -1, 1, rng)}, 1e-4, d);
  });
  s.check("layernorm+linear", [&](std::string& d) {
    return grad_ok(
        [](Graph<double>&, const std::vector<VD>& v) {
          const VD h = layernorm(v[0], LayerNormParams<double>{v[1], v[2]});
          return probe_sum(silu(linear(h, LinearParams<double>{v[3], std::nullopt})), 2);
        },
        {uniform({2, 3, 6}, -1, 1, rng), uniform({6}, 0.5, 1.5, rng), uniform({6}, -1, 1, rng),
         uniform({6, 4}, -1, 1, rng)},
        1e-4, d);
  });
  s.check("selective_scan", [&](std::string& d) {
    return grad_ok(
        [](Graph<double>&, const std::vector<VD>& v) {
          return probe_sum(selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]), 3);
        },
        {uniform({1, 5, 3}, -1, 1, rng), uniform({1, 5, 3}, 0.1, 1, rng), uniform({3, 2}, -2, -0.5, rng),
         uniform({1, 5, 2}, -1, 1, rng), uniform({1, 5, 2}, -1, 1, rng), uniform({3}, -1, 1, rng)},
        1e-4, d);
  });
  const TD target = uniform({1, 3, 8, 8}, 0.05, 0.95, rng);
  const TD low = uniform({1, 3, 8, 8}, 0.02, 0.3, rng);
  const TD pred = uniform({1, 3, 8, 8}, 0.05, 0.95, rng);
  auto loss_case = [&](const std::string& name, double tol,
                       std::function<VD(const VD&, const VD&, const VD&)> loss) {
    s.check(name, [&, loss, tol](std::string& d) {
      return grad_ok(
          [&, loss](Graph<double>& g, const std::vector<VD>& v) {
            return loss(v[0], g.constant(target), g.constant(low));
          },
          {pred}, tol, d);
    });
  };
  loss_case("loss_ssim", 1e-4, [](const VD& p, const VD& t, const VD&) { return loss_ssim(p, t); });
  loss_case("loss_tv", 1e-4, [](const VD& p, const VD&, const VD&) { return loss_tv(p); });
  loss_case("loss_smooth_l1", 1e-4, [](const VD& p, const VD& t, const VD&) { return loss_smooth_l1(p, t); });
  loss_case("loss_inner", 1e-4, [](const VD& p, const VD&, const VD& l) { return loss_inner(p, l); });
  loss_case("loss_his_retinex", 1e-3, [](const VD& p, const VD& t, const VD& l) { return loss_his_retinex(p, t, l); });
  s.check("bee_reduced", [&](std::string& d) {
    const BeeConfig cfg = BeeConfig::reduced();
    const ParamSet<double> params = initialize<double>(bee_param_specs(cfg), 5);
    return grad_ok(
        [&](Graph<double>& g, const std::vector<VD>& v) {
          Binder<double> b(g, params, false);
          return probe_sum(bee_forward(v[0], b, cfg), 4);
        },
        {uniform({1, 3, 16, 16}, 0, 1, rng)}, 1e-4, d);
  });
  return s.done();
}

// y = M x with M[t][s] = sum_m C_t[m] * prod_{r=s+1..t} exp(dt_r A[m]) * gain(dt_s A[m]) dt_s B_s[m], plus D x_t.
double unrolled_scan_error(std::mt19937_64& rng) {
  const Index len = 1 + static_cast<Index>(rng() % 8), dim = 1 + static_cast<Index>(rng() % 3);
  const Index ns = 1 + static_cast<Index>(rng() % 3);
  const TD u = uniform({1, len, dim}, -1, 1, rng), delta = uniform({1, len, dim}, 1e-3, 1.5, rng);
  const TD a = uniform({dim, ns}, -3, -0.1, rng), b = uniform({1, len, ns}, -1, 1, rng);
  const TD c = uniform({1, len, ns}, -1, 1, rng), dskip = uniform({dim}, -1, 1, rng);
  Graph<double> g;
  const TD y = selective_scan(g.constant(u), g.constant(delta), g.constant(a), g.constant(b), g.constant(c),
                              g.constant(dskip))
                   .value();
  double worst = 0;
  for (Index d = 0; d < dim; ++d) {
    for (Index t = 0; t < len; ++t) {
      double acc = dskip[d] * u[t * dim + d];
      for (Index s = 0; s <= t; ++s) {
        double m_ts = 0;
        for (Index m = 0; m < ns; ++m) {
          double decay = 1;
          for (Index r = s + 1; r <= t; ++r) decay *= std::exp(delta[r * dim + d] * a[d * ns + m]);
          const double z = delta[s * dim + d] * a[d * ns + m];
          m_ts += c[t * ns + m] * decay * zoh_gain(z) * delta[s * dim + d] * b[s * ns + m];
        }
        acc += m_ts * u[s * dim + d];
      }
      worst = std::max(worst, std::abs(acc - y[t * dim + d]));
    }
  }
  return worst;
}

SuiteResult scan_suite() {
  Suite s("s6-oracle");
  std::mt19937_64 rng(23);
  for (int k = 0; k < 10; ++k) {
    s.check("draw " + std::to_string(k), [&](std::string& d) {
      const double err = unrolled_scan_error(rng);
      d = "max abs error " + std::to_string(err);
      return err < 1e-10;
    });
  }
  s.check("scan bijection", [&](std::string&) {
    for (Index h = 1; h <= 8; ++h) {
      for (Index w = 1; w <= 8; ++w) {
        for (ScanDirection dir : kScanDirections) {
          const auto order = scan_order(dir, h, w);
          const auto inv = inverse_permutation(order);
          for (Index i = 0; i < h * w; ++i) {
            if (order[static_cast<std::size_t>(inv[static_cast<std::size_t>(i)])] != i) return false;
          }
        }
      }
    }
    return true;
  });
  return s.done();
}

SuiteResult histogram_suite() {
  Suite s("histogram");
  std::mt19937_64 rng(31);
  const std::vector<std::pair<double, double>> ranges{{0, 1}, {-0.5, 1.5}, {0.4, 0.41}, {2, 3}};
  for (const auto& [lo, hi] : ranges) {
    s.check("mass on [" + std::to_string(lo) + "," + std::to_string(hi) + "]", [&](std::string& d) {
      Graph<double> g;
      const double mass = soft_histogram(g.constant(uniform({1, 3, 9, 7}, lo, hi, rng))).value().array().sum();
      d = "mass " + std::to_string(mass);
      return std::abs(mass - 1.0) < 1e-6;
    });
  }
  s.check("soft equals hard at bin centres", [&](std::string&) {
    TD x({500});
    for (Index i = 0; i < x.size(); ++i) x[i] = (static_cast<double>(rng() % 256) + 0.5) / 256.0;
    Graph<double> g;
    const TD soft = soft_histogram(g.constant(x)).value();
    const auto hard = hard_histogram(x);
    for (Index b = 0; b < 256; ++b) {
      if (soft[b] != hard[static_cast<std::size_t>(b)]) return false;
    }
    return true;
  });
  return s.done();
}

SuiteResult checkpoint_suite() {
  Suite s("checkpoint");
  std::mt19937_64 rng(41);
  TrainState<float> state;
  state.step = 17;
  state.bee.set("w", uniform({3, 4}, -1, 1, rng).cast<float>());
  state.dn.set("b", uniform({5}, -1, 1, rng).cast<float>());
  const Checkpoint<float> ckpt = pack_state(state, desk_config());
  const std::string bytes = encode_checkpoint(ckpt);
  s.check("round trip", [&](std::string&) { return decode_checkpoint<float>(bytes) == ckpt; });
  s.check("corruption detected", [&](std::string& d) {
    std::string bad = bytes;
    bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x40);
    try {
      decode_checkpoint<float>(bad);
    } catch (const Error& e) {
      return e.code() == ErrorCode::CheckpointError;
    }
    d = "corrupted bytes decoded";
    return false;
  });
  s.check("version mismatch rejected", [&](std::string&) {
    std::string bad = bytes;
    bad[4] = 9;
    try {
      decode_checkpoint<float>(bad);
    } catch (const Error& e) {
      return e.code() == ErrorCode::CheckpointError;
    }
    return false;
  });
  return s.done();
}

SuiteResult file_suite(const std::filesystem::path& path) {
  Suite s("checkpoint-file");
  s.check(path.string(), [&](std::string&) {
    const Checkpoint<float> ckpt = load_checkpoint<float>(path);
    checkpoint_config(ckpt);
    unpack_state(ckpt);
    return true;
  });
  return s.done();
}

}  // namespace

std::vector<SuiteResult> run_selftest(const std::optional<std::filesystem::path>& checkpoint) {
  std::vector<SuiteResult> out{gradient_suite(), scan_suite(), histogram_suite(), checkpoint_suite()};
  if (checkpoint) out.push_back(file_suite(*checkpoint));
  return out;
}

void print_selftest(std::ostream& out, const std::vector<SuiteResult>& suites) {
  for (const auto& s : suites) {
    out << std::left << std::setw(18) << s.name << s.passed << "/" << s.total << (s.ok() ? "  ok" : "  FAILED") << "\n";
    for (const auto& f : s.failures) out << "  - " << f << "\n";
  }
}

}  // namespace dpec
