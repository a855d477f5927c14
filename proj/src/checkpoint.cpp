#include "hat/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hat {
namespace {

constexpr char kMagic[8] = {'H', 'A', 'T', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void little(U v) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { little(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { little(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U little() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string meta_text(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw DataError("checkpoint meta entry '" + k + "' contains a reserved character");
    }
    s += k + "=" + v + "\n";
  }
  return s;
}

}  // namespace

const NamedArray* CheckpointData::find(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const std::string& CheckpointData::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw DataError("checkpoint has no '" + key + "' entry");
  return it->second;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  auto meta = ckpt.meta;
  meta["format.dtype"] = ckpt.dtype == DType::F64 ? "f64" : "f32";
  const std::string text = meta_text(meta);
  w.little(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.little(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    if (numel(a.shape) != static_cast<std::int64_t>(a.values.size())) {
      throw DataError("checkpoint array '" + a.name + "' has " + std::to_string(a.values.size()) +
                      " values for shape " + to_string(a.shape));
    }
    w.little(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name.data(), a.name.size());
    w.little(static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) w.little(static_cast<std::uint64_t>(e));
    for (double v : a.values) {
      if (ckpt.dtype == DType::F64) w.f64(v);
      else w.f32(static_cast<float>(v));
    }
  }
  w.little(fnv1a64(w.buffer()));
  return std::move(w.buffer());
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 8);
  Reader tail(bytes.subspan(bytes.size() - 8));
  const std::uint64_t stored = tail.little<std::uint64_t>();
  if (stored != fnv1a64(body)) throw DataError("checkpoint checksum mismatch");

  Reader r(body);
  r.text(sizeof kMagic);
  CheckpointData ckpt;
  const auto text_len = r.little<std::uint32_t>();
  std::istringstream is(r.text(text_len));
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed checkpoint meta line '" + line + "'");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::string dtype = ckpt.get("format.dtype");
  if (dtype != "f32" && dtype != "f64") throw DataError("unknown checkpoint dtype '" + dtype + "'");
  ckpt.dtype = dtype == "f64" ? DType::F64 : DType::F32;
  ckpt.meta.erase("format.dtype");

  const auto count = r.little<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.text(r.little<std::uint32_t>());
    const auto rank = r.little<std::uint32_t>();
    if (rank > 16) throw DataError("checkpoint array '" + a.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) a.shape.push_back(static_cast<std::int64_t>(r.little<std::uint64_t>()));
    const auto n = static_cast<std::size_t>(numel(a.shape));
    r.need(n * (ckpt.dtype == DType::F64 ? 8 : 4));
    a.values.resize(n);
    for (auto& v : a.values) {
      v = ckpt.dtype == DType::F64 ? std::bit_cast<double>(r.little<std::uint64_t>())
                                   : static_cast<double>(std::bit_cast<float>(r.little<std::uint32_t>()));
    }
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.pos() != body.size()) throw DataError("trailing bytes after checkpoint records");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  // Write-then-rename so an interrupted save never clobbers the previous file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
CheckpointData model_checkpoint(const HatModel<T>& model) {
  CheckpointData ckpt;
  ckpt.dtype = dtype_of<T>();
  std::istringstream is(model.config().to_text());
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    ckpt.meta["model." + line.substr(0, eq)] = line.substr(eq + 1);
  }
  for (const auto& [name, t] : model.parameters()) {
    ckpt.arrays.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  return ckpt;
}

ModelConfig config_from_checkpoint(const CheckpointData& ckpt) {
  std::string text;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.rfind("model.", 0) == 0) text += k.substr(6) + "=" + v + "\n";
  }
  if (text.empty()) throw DataError("checkpoint carries no model config");
  try {
    return ModelConfig::from_text(text);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint model config invalid: ") + e.what());
  }
}

template <typename T>
void load_parameters(HatModel<T>& model, const CheckpointData& ckpt, const std::vector<std::string>& ignored_prefixes) {
  auto ignored = [&](const std::string& name) {
    for (const auto& p : ignored_prefixes) {
      if (name.rfind(p, 0) == 0) return true;
    }
    return false;
  };
  for (const auto& [name, t] : model.parameters()) {
    const NamedArray* a = ckpt.find(name);
    if (a == nullptr) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (a->shape != t.shape()) {
      throw DataError("parameter '" + name + "' has shape " + to_string(a->shape) + " in checkpoint but " +
                      to_string(t.shape()) + " in model");
    }
  }
  for (const auto& a : ckpt.arrays) {
    if (ignored(a.name)) continue;
    bool known = false;
    for (const auto& [name, t] : model.parameters()) known = known || name == a.name;
    if (!known) throw DataError("checkpoint has unknown parameter path '" + a.name + "'");
  }
  const ModelConfig stored = config_from_checkpoint(ckpt);
  if (!(stored == model.config())) {
    std::istringstream want(model.config().to_text()), got(stored.to_text());
    std::string lw, lg;
    while (std::getline(want, lw) && std::getline(got, lg)) {
      if (lw != lg) throw DataError("checkpoint config differs from model: '" + lg + "' vs '" + lw + "'");
    }
  }
  for (const auto& [name, t] : model.parameters()) {
    const NamedArray* a = ckpt.find(name);
    auto dst = const_cast<Tensor<T>&>(t).mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
  }
}

template <typename T>
void save_model(const std::filesystem::path& path, const HatModel<T>& model) {
  write_checkpoint(path, model_checkpoint(model));
}

template <typename T>
HatModel<T> load_model(const std::filesystem::path& path) {
  const auto ckpt = read_checkpoint(path);
  HatModel<T> model(config_from_checkpoint(ckpt));
  load_parameters(model, ckpt);
  return model;
}

#define HAT_INSTANTIATE_CKPT(T)                                                                      \
  template CheckpointData model_checkpoint(const HatModel<T>&);                                      \
  template void load_parameters(HatModel<T>&, const CheckpointData&, const std::vector<std::string>&); \
  template void save_model(const std::filesystem::path&, const HatModel<T>&);                        \
  template HatModel<T> load_model(const std::filesystem::path&);

HAT_INSTANTIATE_CKPT(float)
HAT_INSTANTIATE_CKPT(double)

}  // namespace hat
