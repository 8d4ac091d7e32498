#include "dpec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dpec {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename S> constexpr std::uint8_t dtype_code();
template <> constexpr std::uint8_t dtype_code<float>() { return 1; }
template <> constexpr std::uint8_t dtype_code<double>() { return 2; }

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void put_raw(const void* data, std::size_t n) { out_.append(static_cast<const char*>(data), n); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    return std::string(take(n), n);
  }
  const char* take(std::size_t n) {
    if (n > end_ - pos_) throw Error(ErrorCode::CheckpointError, "checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename S>
std::string encode_checkpoint(const Checkpoint<S>& ckpt) {
  Writer w;
  w.put_raw("DPEC", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.stage));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.mode));
  w.put<std::uint64_t>(ckpt.seed);
  w.put<std::uint64_t>(ckpt.config_hash);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(ckpt.step));
  w.put_string(ckpt.config_text);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string(name);
    w.put<std::uint8_t>(dtype_code<S>());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put_raw(t.data(), static_cast<std::size_t>(t.size()) * sizeof(S));
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

template <typename S>
Checkpoint<S> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 + sizeof(std::uint64_t) || bytes.compare(0, 4, "DPEC") != 0) {
    throw Error(ErrorCode::CheckpointError, "not a DPEC checkpoint");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  Reader r(bytes, body);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::CheckpointError, "checkpoint version " + std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointVersion));
  }
  if (stored != fnv1a64(std::string_view(bytes.data(), body))) {
    throw Error(ErrorCode::CheckpointError, "checkpoint checksum mismatch");
  }
  Checkpoint<S> ckpt;
  ckpt.stage = static_cast<int>(r.get<std::uint32_t>());
  const auto mode = r.get<std::uint32_t>();
  if (ckpt.stage != 1 && ckpt.stage != 2) throw Error(ErrorCode::CheckpointError, "checkpoint stage out of range");
  if (mode > static_cast<std::uint32_t>(EnhanceMode::dpec_retinex)) {
    throw Error(ErrorCode::CheckpointError, "checkpoint mode out of range");
  }
  ckpt.mode = static_cast<EnhanceMode>(mode);
  ckpt.seed = r.get<std::uint64_t>();
  ckpt.config_hash = r.get<std::uint64_t>();
  ckpt.step = static_cast<std::int64_t>(r.get<std::uint64_t>());
  ckpt.config_text = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != dtype_code<S>()) {
      throw Error(ErrorCode::CheckpointError, "tensor '" + name + "' has dtype " + std::to_string(dtype) +
                                                  ", expected " + std::to_string(dtype_code<S>()));
    }
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw Error(ErrorCode::CheckpointError, "tensor '" + name + "' has bad rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d == 0 || d > (1ULL << 31)) throw Error(ErrorCode::CheckpointError, "tensor '" + name + "' has bad dims");
      shape.push_back(static_cast<Index>(d));
    }
    if (ckpt.tensors.contains(name)) throw Error(ErrorCode::CheckpointError, "duplicate tensor '" + name + "'");
    Tensor<S> t(shape);
    const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(S);
    std::memcpy(t.data(), r.take(n), n);
    ckpt.tensors.set(name, std::move(t));
  }
  if (!r.done()) throw Error(ErrorCode::CheckpointError, "trailing bytes in checkpoint");
  return ckpt;
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<S>& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
      throw Error(ErrorCode::IoError, "cannot write checkpoint '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot move checkpoint into place: " + ec.message());
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read checkpoint '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint<S>(buf.str());
}

namespace {

template <typename S>
void put_prefixed(ParamSet<S>& out, const std::string& prefix, const ParamSet<S>& src) {
  for (const auto& [name, t] : src) out.set(prefix + name, t);
}

}  // namespace

template <typename S>
Checkpoint<S> pack_state(const TrainState<S>& state, const RunConfig& cfg) {
  Checkpoint<S> ckpt;
  ckpt.stage = state.stage;
  ckpt.mode = cfg.model.mode;
  ckpt.seed = cfg.train.seed;
  ckpt.config_text = serialize_config(cfg);
  ckpt.config_hash = fnv1a64(ckpt.config_text);
  ckpt.step = state.step;
  put_prefixed(ckpt.tensors, "bee/", state.bee);
  put_prefixed(ckpt.tensors, "dn/", state.dn);
  put_prefixed(ckpt.tensors, "adam.m/", state.adam.m);
  put_prefixed(ckpt.tensors, "adam.v/", state.adam.v);
  return ckpt;
}

template <typename S>
TrainState<S> unpack_state(const Checkpoint<S>& ckpt) {
  TrainState<S> state;
  state.stage = ckpt.stage;
  state.step = ckpt.step;
  state.adam.step = ckpt.step;
  for (const auto& [name, t] : ckpt.tensors) {
    const auto slash = name.find('/');
    const std::string group = name.substr(0, slash), rest = slash == std::string::npos ? "" : name.substr(slash + 1);
    if (group == "bee") {
      state.bee.set(rest, t);
    } else if (group == "dn") {
      state.dn.set(rest, t);
    } else if (group == "adam.m") {
      state.adam.m.set(rest, t);
    } else if (group == "adam.v") {
      state.adam.v.set(rest, t);
    } else {
      throw Error(ErrorCode::CheckpointError, "unexpected tensor '" + name + "'");
    }
  }
  return state;
}

template <typename S>
RunConfig checkpoint_config(const Checkpoint<S>& ckpt) {
  if (fnv1a64(ckpt.config_text) != ckpt.config_hash) {
    throw Error(ErrorCode::CheckpointError, "embedded configuration does not match its hash");
  }
  try {
    return parse_config(ckpt.config_text);
  } catch (const Error& e) {
    throw Error(ErrorCode::CheckpointError, std::string("embedded configuration: ") + e.what());
  }
}

#define DPEC_INSTANTIATE_CHECKPOINT(S)                                           \
  template std::string encode_checkpoint(const Checkpoint<S>&);                  \
  template Checkpoint<S> decode_checkpoint(const std::string&);                  \
  template void save_checkpoint(const std::filesystem::path&, const Checkpoint<S>&); \
  template Checkpoint<S> load_checkpoint(const std::filesystem::path&);          \
  template Checkpoint<S> pack_state(const TrainState<S>&, const RunConfig&);     \
  template TrainState<S> unpack_state(const Checkpoint<S>&);                     \
  template RunConfig checkpoint_config(const Checkpoint<S>&);

DPEC_INSTANTIATE_CHECKPOINT(float)
DPEC_INSTANTIATE_CHECKPOINT(double)

}  // namespace dpec
