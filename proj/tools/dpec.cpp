// dpec: train, run and evaluate the dual-path low-light enhancer.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>

#include "dpec/checkpoint.hpp"
#include "dpec/config.hpp"
#include "dpec/imaging.hpp"
#include "dpec/selftest.hpp"
#include "dpec/synth.hpp"

namespace fs = std::filesystem;
using namespace dpec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitPrecondition = 3;
constexpr int kExitNumeric = 4;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
      return kExitUsage;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteInput:
      return kExitNumeric;
    default:
      return kExitPrecondition;
  }
}

std::vector<std::string> png_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IoError, "not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> paired_names(const fs::path& low, const fs::path& ref) {
  const auto a = png_names(low), b = png_names(ref);
  if (a != b) {
    std::vector<std::string> only;
    std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(only));
    throw Error(ErrorCode::PairingError, "unpaired file '" + (only.empty() ? std::string("?") : only.front()) +
                                             "' between " + low.string() + " and " + ref.string());
  }
  if (a.empty()) throw Error(ErrorCode::PairingError, "no PNG files in " + low.string());
  return a;
}

std::vector<ImagePair<float>> load_pairs(const fs::path& low, const fs::path& ref) {
  std::vector<ImagePair<float>> out;
  for (const auto& name : paired_names(low, ref)) {
    out.push_back({name, to_tensor<float>(load_png(low / name)), to_tensor<float>(load_png(ref / name))});
  }
  return out;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("DPEC_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw Error(ErrorCode::ConfigError, "DPEC_SEED must be an unsigned integer");
  return s;
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (auto env = env_seed()) return *env;
  return fallback;
}

std::pair<Index, Index> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    const Index h = std::stol(text.substr(0, x)), w = std::stol(text.substr(x + 1));
    if (h < 1 || w < 1) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "size must look like HxW, got '" + text + "'");
  }
}

Tensor<float> run_enhance(const Tensor<float>& img, const TrainState<float>& state, const RunConfig& cfg,
                          EnhanceMode mode, int stage) {
  Graph<float> g;
  Binder<float> bee(g, state.bee, false);
  Binder<float> dn(g, state.dn, false);
  return enhance(g.constant(img), bee, stage == 2 ? &dn : nullptr, cfg.model, mode, stage).value();
}

struct LoadedModel {
  RunConfig cfg;
  TrainState<float> state;
  int stage = 1;
  EnhanceMode mode = EnhanceMode::dpec;
};

LoadedModel load_model(const fs::path& path, std::optional<int> stage, const std::string& mode) {
  const Checkpoint<float> ckpt = load_checkpoint<float>(path);
  LoadedModel m{checkpoint_config(ckpt), unpack_state(ckpt), stage.value_or(ckpt.stage), ckpt.mode};
  if (!mode.empty()) m.mode = parse_enhance_mode(mode);
  if (m.stage != 1 && m.stage != 2) throw Error(ErrorCode::ConfigError, "--stage must be 1 or 2");
  if (m.stage > ckpt.stage || (m.stage == 2 && m.state.dn.size() == 0)) {
    throw Error(ErrorCode::StageUnavailable, "checkpoint holds stage " + std::to_string(ckpt.stage) +
                                                 ", stage " + std::to_string(m.stage) + " requested");
  }
  return m;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, low, ref, out, resume, val_low, val_ref;
  std::optional<std::uint64_t> seed;
  std::optional<int> stage;
  std::optional<std::int64_t> steps;
  bool desk = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.desk ? desk_config() : default_config();
  TrainState<float> state;
  bool resumed = false;
  if (!a.resume.empty()) {
    const Checkpoint<float> ckpt = load_checkpoint<float>(a.resume);
    cfg = checkpoint_config(ckpt);
    state = unpack_state(ckpt);
    resumed = true;
  }
  const ModelConfig model_before = cfg.model;
  if (!a.config.empty()) cfg = load_config(a.config, cfg);
  if (resumed && cfg.model != model_before) {
    throw Error(ErrorCode::ConfigError, "model settings differ from the resumed checkpoint");
  }
  cfg.train.seed = resolve_seed(a.seed, cfg.train.seed);
  if (a.stage) cfg.train.stage = *a.stage;
  if (a.steps) cfg.train.max_steps = *a.steps;
  if (cfg.train.stage == 2 && !resumed) {
    throw Error(ErrorCode::MissingStage1Checkpoint, "stage 2 needs --resume with a stage-1 checkpoint");
  }
  if (cfg.train.stage == 2 && !cfg.model.use_denoiser) {
    throw Error(ErrorCode::ConfigError, "stage 2 trains the denoiser, but model.denoiser = false");
  }

  const auto data = load_pairs(a.low, a.ref);
  std::vector<ImagePair<float>> val;
  if (!a.val_low.empty() || !a.val_ref.empty()) val = load_pairs(a.val_low, a.val_ref);

  const fs::path out(a.out);
  fs::create_directories(out);
  const fs::path ckpt_path = out / "checkpoint.dpec";
  const bool append = resumed && state.stage == cfg.train.stage;
  std::ofstream log(out / "loss.log", append ? std::ios::app : std::ios::trunc);
  if (!log) throw Error(ErrorCode::IoError, "cannot open " + (out / "loss.log").string());

  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { log << r.log_line() << '\n' << std::flush; };
  hooks.on_checkpoint = [&] { save_checkpoint(ckpt_path, pack_state(state, cfg)); };
  const auto history = train_stage<float>(data, val, cfg.train, cfg.model, state, hooks);
  std::cout << "stage " << cfg.train.stage << ": " << history.size() << " steps, step " << state.step;
  if (!history.empty()) std::cout << ", loss " << history.front().total << " -> " << history.back().total;
  std::cout << "\ncheckpoint: " << ckpt_path.string() << "\n";
  return kExitOk;
}

struct EnhanceArgs {
  std::string checkpoint, input, output, mode;
  std::optional<int> stage;
};

int cmd_enhance(const EnhanceArgs& a) {
  const LoadedModel m = load_model(a.checkpoint, a.stage, a.mode);
  const fs::path in(a.input), out(a.output);
  if (fs::is_directory(in)) {
    fs::create_directories(out);
    for (const auto& name : png_names(in)) {
      save_png(out / name, from_tensor(run_enhance(to_tensor<float>(load_png(in / name)), m.state, m.cfg, m.mode, m.stage)));
    }
    return kExitOk;
  }
  save_png(out, from_tensor(run_enhance(to_tensor<float>(load_png(in)), m.state, m.cfg, m.mode, m.stage)));
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, low, ref, mode;
  std::optional<int> stage;
};

int cmd_eval(const EvalArgs& a) {
  std::optional<LoadedModel> m;
  if (!a.checkpoint.empty()) m = load_model(a.checkpoint, a.stage, a.mode);
  struct Row {
    std::string name;
    double psnr, ssim;
  };
  std::vector<Row> rows;
  for (const auto& name : paired_names(a.low, a.ref)) {
    Tensor<float> img = to_tensor<float>(load_png(fs::path(a.low) / name));
    const Tensor<float> ref = to_tensor<float>(load_png(fs::path(a.ref) / name));
    if (m) img = to_tensor<float>(from_tensor(run_enhance(img, m->state, m->cfg, m->mode, m->stage)));
    if (img.shape() != ref.shape()) throw Error(ErrorCode::PairingError, "'" + name + "' differs in size");
    const Tensor<double> x = img.cast<double>(), y = ref.cast<double>();
    rows.push_back({name, psnr(x, y), ssim_index(x, y)});
  }
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  double mp = 0, ms = 0;
  std::cout << std::left << std::setw(static_cast<int>(width)) << "name" << std::right << std::setw(10) << "psnr"
            << std::setw(10) << "ssim" << "\n";
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(static_cast<int>(width)) << r.name << std::right << std::fixed
              << std::setprecision(3) << std::setw(10) << r.psnr << std::setw(10) << std::setprecision(4) << r.ssim
              << "\n";
    mp += r.psnr;
    ms += r.ssim;
  }
  mp /= static_cast<double>(rows.size());
  ms /= static_cast<double>(rows.size());
  std::cout << std::left << std::setw(static_cast<int>(width)) << "mean" << std::right << std::setprecision(3)
            << std::setw(10) << mp << std::setw(10) << std::setprecision(4) << ms << "\n\n";
  std::cout << std::setprecision(6);
  for (const auto& r : rows) std::cout << r.name << " " << r.psnr << " " << r.ssim << "\n";
  std::cout << "mean " << mp << " " << ms << "\n";
  return kExitOk;
}

struct BenchArgs {
  std::string config, size = "64x64";
  int iters = 10;
  int stage = 2;
  bool desk = false;
  std::optional<std::uint64_t> seed;
};

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = a.desk ? desk_config() : default_config();
  if (!a.config.empty()) cfg = load_config(a.config, cfg);
  if (a.iters < 1) throw Error(ErrorCode::ConfigError, "--iters must be >= 1");
  if (a.stage != 1 && a.stage != 2) throw Error(ErrorCode::ConfigError, "--stage must be 1 or 2");
  const auto [h, w] = parse_size(a.size);
  const std::uint64_t seed = resolve_seed(a.seed, cfg.train.seed);
  TrainState<float> state;
  state.bee = initialize<float>(bee_param_specs(cfg.model.bee), derive_seed(seed, fnv1a64("bee")));
  state.dn = initialize<float>(denoise_param_specs(cfg.model.denoise), derive_seed(seed, fnv1a64("dn")));
  const Tensor<float> img = synth_pair(seed, 0, h, w).low.cast<float>();
  std::vector<double> times;
  for (int i = 0; i < a.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_enhance(img, state, cfg, cfg.model.mode, a.stage);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  const double mean = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
  double var = 0;
  for (double t : times) var += (t - mean) * (t - mean);
  const double sd = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
  std::cout << std::fixed << std::setprecision(4) << "size " << h << "x" << w << " stage " << a.stage << " iters "
            << a.iters << ": " << mean << " s +- " << sd << " s per image\n";
  return kExitOk;
}

struct SynthArgs {
  std::string out, size = "64x64";
  int count = 2;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
  const auto [h, w] = parse_size(a.size);
  const auto names = write_synth_set(a.out, a.count, resolve_seed(a.seed, 42), h, w);
  std::cout << "wrote " << names.size() << " pairs to " << a.out << "\n";
  return kExitOk;
}

struct InitArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  int stage = 1;
  bool zero_head = false;
  bool desk = false;
};

int cmd_init(const InitArgs& a) {
  RunConfig cfg = a.desk ? desk_config() : default_config();
  if (!a.config.empty()) cfg = load_config(a.config, cfg);
  if (a.stage != 1 && a.stage != 2) throw Error(ErrorCode::ConfigError, "--stage must be 1 or 2");
  cfg.train.seed = resolve_seed(a.seed, cfg.train.seed);
  TrainState<float> state;
  state.stage = a.stage;
  state.bee = initialize<float>(bee_param_specs(cfg.model.bee), derive_seed(cfg.train.seed, fnv1a64("bee")));
  if (a.zero_head) {
    state.bee.at("head.weight").array().setZero();
    state.bee.at("head.bias").array().setZero();
  }
  if (a.stage == 2) {
    state.dn = initialize<float>(denoise_param_specs(cfg.model.denoise), derive_seed(cfg.train.seed, fnv1a64("dn")));
  }
  save_checkpoint(a.out, pack_state(state, cfg));
  return kExitOk;
}

int cmd_params(const std::string& config, bool desk) {
  RunConfig cfg = desk ? desk_config() : default_config();
  if (!config.empty()) cfg = load_config(config, cfg);
  BeeConfig base = cfg.model.bee;
  base.mff = false;
  BeeConfig with_mff = base;
  with_mff.mff = true;
  const Index n0 = count_scalars(bee_param_specs(base));
  const Index n1 = count_scalars(bee_param_specs(with_mff));
  const Index n2 = n1 + count_scalars(denoise_param_specs(cfg.model.denoise));
  std::cout << std::fixed << std::setprecision(3) << "baseline     " << std::setw(10) << n0 << "  " << n0 / 1e6
            << "M\n+mff         " << std::setw(10) << n1 << "  " << n1 / 1e6 << "M\n+mff+dc      " << std::setw(10)
            << n2 << "  " << n2 / 1e6 << "M\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-path low-light image enhancement"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train one stage on paired PNG directories");
  t->add_option("--config", train.config, "key = value configuration file");
  t->add_option("--data-low", train.low, "directory of low-light PNGs")->required();
  t->add_option("--data-ref", train.ref, "directory of reference PNGs with the same names")->required();
  t->add_option("--out", train.out, "output directory for checkpoint.dpec and loss.log")->required();
  t->add_option("--resume", train.resume, "checkpoint to continue from (required for stage 2)");
  t->add_option("--val-low", train.val_low, "validation low-light directory");
  t->add_option("--val-ref", train.val_ref, "validation reference directory");
  t->add_option("--seed", train.seed, "overrides train.seed");
  t->add_option("--stage", train.stage, "overrides train.stage")->check(CLI::Range(1, 2));
  t->add_option("--steps", train.steps, "overrides train.max_steps");
  t->add_flag("--desk", train.desk, "start from the small desk-scale configuration");

  EnhanceArgs enh;
  auto* e = app.add_subcommand("enhance", "enhance a PNG or a directory of PNGs");
  e->add_option("--checkpoint", enh.checkpoint)->required();
  e->add_option("--input", enh.input, "PNG file or directory")->required();
  e->add_option("--output", enh.output, "PNG file or directory")->required();
  e->add_option("--mode", enh.mode, "dpec or retinex (default: checkpoint mode)");
  e->add_option("--stage", enh.stage, "1 or 2 (default: checkpoint stage)");

  EvalArgs ev;
  auto* v = app.add_subcommand("eval", "PSNR/SSIM of enhanced (or raw) low-light images against references");
  v->add_option("--checkpoint", ev.checkpoint, "without it the low images are compared directly");
  v->add_option("--dir-low", ev.low)->required();
  v->add_option("--dir-ref", ev.ref)->required();
  v->add_option("--mode", ev.mode);
  v->add_option("--stage", ev.stage);

  std::string selftest_ckpt;
  auto* s = app.add_subcommand("selftest", "run built-in numerical checks");
  s->add_option("--checkpoint", selftest_ckpt, "also verify this checkpoint file");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "time the forward pass");
  b->add_option("--config", bench.config);
  b->add_option("--size", bench.size, "HxW");
  b->add_option("--iters", bench.iters);
  b->add_option("--stage", bench.stage);
  b->add_option("--seed", bench.seed);
  b->add_flag("--desk", bench.desk);

  SynthArgs synth;
  auto* y = app.add_subcommand("synth", "generate paired synthetic low-light data");
  y->add_option("--out", synth.out)->required();
  y->add_option("--count", synth.count);
  y->add_option("--seed", synth.seed);
  y->add_option("--size", synth.size, "HxW");

  InitArgs init;
  auto* i = app.add_subcommand("init", "write a freshly initialised checkpoint");
  i->add_option("--config", init.config);
  i->add_option("--out", init.out)->required();
  i->add_option("--seed", init.seed);
  i->add_option("--stage", init.stage);
  i->add_flag("--zero-head", init.zero_head, "zero the output head so the error map is 0");
  i->add_flag("--desk", init.desk);

  std::string params_config;
  bool params_desk = false;
  auto* p = app.add_subcommand("params", "report parameter counts with and without MFF and the denoiser");
  p->add_option("--config", params_config);
  p->add_flag("--desk", params_desk);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_enhance(enh);
    if (v->parsed()) return cmd_eval(ev);
    if (b->parsed()) return cmd_bench(bench);
    if (y->parsed()) return cmd_synth(synth);
    if (i->parsed()) return cmd_init(init);
    if (p->parsed()) return cmd_params(params_config, params_desk);
    if (s->parsed()) {
      const auto suites = run_selftest(selftest_ckpt.empty() ? std::nullopt : std::optional<fs::path>(selftest_ckpt));
      print_selftest(std::cout, suites);
      return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& r) { return r.ok(); }) ? kExitOk : 1;
    }
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code(err.code());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitPrecondition;
  }
  return kExitUsage;
}
