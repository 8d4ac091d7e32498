#include "dpec/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <type_traits>

namespace dpec {

RunConfig default_config() { return RunConfig{}; }

RunConfig desk_config() {
  RunConfig cfg;
  cfg.model.bee.channels = 16;
  cfg.model.bee.encoder_blocks = {1, 1};
  cfg.model.bee.decoder_blocks = {1, 1};
  cfg.model.bee.d_state = 4;
  cfg.model.denoise.features = 16;
  cfg.model.denoise.blocks = 2;
  cfg.train.epochs = 150;
  cfg.train.batch_size = 2;
  cfg.train.crop_size = 64;
  return cfg;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(const std::string& text) {
  T value{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw std::invalid_argument("expected a number, got '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw std::invalid_argument("expected true/false, got '" + text + "'");
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, double>) {
    return format_double(v);
  } else if constexpr (std::is_same_v<T, std::optional<double>>) {
    return v ? format_double(*v) : "auto";
  } else if constexpr (std::is_same_v<T, std::array<int, 2>>) {
    return std::to_string(v[0]) + "," + std::to_string(v[1]);
  } else if constexpr (std::is_same_v<T, EnhanceMode>) {
    return to_string(v);
  } else {
    return std::to_string(v);
  }
}

template <typename T>
T parse_value(const std::string& text) {
  if constexpr (std::is_same_v<T, bool>) {
    return parse_bool(text);
  } else if constexpr (std::is_same_v<T, std::optional<double>>) {
    if (text == "auto") return std::nullopt;
    return parse_number<double>(text);
  } else if constexpr (std::is_same_v<T, std::array<int, 2>>) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("expected two comma-separated integers");
    return {parse_number<int>(trim(std::string_view(text).substr(0, comma))),
            parse_number<int>(trim(std::string_view(text).substr(comma + 1)))};
  } else if constexpr (std::is_same_v<T, EnhanceMode>) {
    return parse_enhance_mode(text);
  } else {
    return parse_number<T>(text);
  }
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Access>
Field field(std::string key, Access access) {
  using T = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  return Field{std::move(key),
               [access](const RunConfig& c) { return format_value<T>(access(const_cast<RunConfig&>(c))); },
               [access](RunConfig& c, const std::string& text) { access(c) = parse_value<T>(text); }};
}

#define DPEC_FIELD(key, member) field(key, [](RunConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      DPEC_FIELD("model.mode", model.mode),
      DPEC_FIELD("model.channels", model.bee.channels),
      DPEC_FIELD("model.encoder_blocks", model.bee.encoder_blocks),
      DPEC_FIELD("model.decoder_blocks", model.bee.decoder_blocks),
      DPEC_FIELD("model.d_state", model.bee.d_state),
      DPEC_FIELD("model.ssm_expand", model.bee.ssm_expand),
      DPEC_FIELD("model.mff", model.bee.mff),
      DPEC_FIELD("model.denoiser", model.use_denoiser),
      DPEC_FIELD("ss2d.shared_directions", model.bee.shared_directions),
      DPEC_FIELD("denoise.features", model.denoise.features),
      DPEC_FIELD("denoise.blocks", model.denoise.blocks),
      DPEC_FIELD("denoise.frequencies", model.denoise.frequencies),
      DPEC_FIELD("denoise.gamma", model.denoise.gamma),
      DPEC_FIELD("denoise.dark_window", model.denoise.dark_window),
      DPEC_FIELD("denoise.omega", model.denoise.omega),
      DPEC_FIELD("train.stage", train.stage),
      DPEC_FIELD("train.epochs", train.epochs),
      DPEC_FIELD("train.max_steps", train.max_steps),
      DPEC_FIELD("train.lr_start", train.lr_start),
      DPEC_FIELD("train.lr_min", train.lr_min),
      DPEC_FIELD("train.beta1", train.beta1),
      DPEC_FIELD("train.beta2", train.beta2),
      DPEC_FIELD("train.adam_eps", train.adam_eps),
      DPEC_FIELD("train.batch_size", train.batch_size),
      DPEC_FIELD("train.crop_size", train.crop_size),
      DPEC_FIELD("train.seed", train.seed),
      DPEC_FIELD("train.clip_norm", train.clip_norm),
      DPEC_FIELD("train.flip", train.flip),
      DPEC_FIELD("train.val_every", train.val_every),
      DPEC_FIELD("loss.w_ssim", train.weights.ssim),
      DPEC_FIELD("loss.w_perceptual", train.weights.perceptual),
      DPEC_FIELD("loss.w_inner", train.weights.inner),
      DPEC_FIELD("loss.w_his", train.weights.his),
      DPEC_FIELD("loss.w_tv", train.weights.tv),
      DPEC_FIELD("loss.w_smooth", train.weights.smooth),
      DPEC_FIELD("loss.use_ssim", train.toggles.ssim),
      DPEC_FIELD("loss.use_perceptual", train.toggles.perceptual),
      DPEC_FIELD("loss.use_inner", train.toggles.inner),
      DPEC_FIELD("loss.use_his", train.toggles.his),
      DPEC_FIELD("loss.use_tv", train.toggles.tv),
      DPEC_FIELD("loss.use_smooth", train.toggles.smooth),
      DPEC_FIELD("loss.negate_inner", train.toggles.negate_inner),
  };
  return table;
}

#undef DPEC_FIELD

}  // namespace

RunConfig parse_config(const std::string& text, const RunConfig& base) {
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key.emplace(f.key, &f);
  RunConfig cfg = base;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::ConfigError, where + "expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw Error(ErrorCode::ConfigError, where + "unknown key '" + key + "'");
    if (auto [prev, fresh] = seen.emplace(key, line_no); !fresh) {
      throw Error(ErrorCode::ConfigError, where + "'" + key + "' already set on line " + std::to_string(prev->second));
    }
    try {
      it->second->set(cfg, value);
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, where + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw Error(ErrorCode::ConfigError, where + key + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read config '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), base);
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(serialize_config(cfg)); }

}  // namespace dpec
