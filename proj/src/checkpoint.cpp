#include "bitskip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "bitskip/fileio.hpp"

namespace bitskip {

namespace {

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  template <typename T>
  void uint(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
  void u8(std::uint8_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : buf_(std::move(data)) {}

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T uint() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }
  std::uint8_t u8() { return uint<std::uint8_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Shape& shape, const RowMatrix<float>& values) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.u64(static_cast<std::uint64_t>(d));
  for (Index i = 0; i < values.size(); ++i) w.f32(values.data()[i]);
}

struct TensorRecord {
  Shape shape;
  std::vector<float> values;
};

void write_config(Writer& w, const ModelConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.layers));
  w.u64(static_cast<std::uint64_t>(c.hidden));
  w.u64(static_cast<std::uint64_t>(c.heads));
  w.u64(static_cast<std::uint64_t>(c.kv_heads));
  w.u64(static_cast<std::uint64_t>(c.ffn_dim));
  w.u64(static_cast<std::uint64_t>(c.vocab_size));
  w.u64(static_cast<std::uint64_t>(c.max_seq_len));
  w.f64(c.schedule.p_max);
  w.u8(static_cast<std::uint8_t>(c.schedule.mode));
  w.u8(static_cast<std::uint8_t>(c.variant.name));
  w.u8(static_cast<std::uint8_t>(c.variant.features.weight_mode));
  w.u8(static_cast<std::uint8_t>(c.variant.features.activation_bits));
  w.u8(c.variant.features.hadamard ? 1 : 0);
  w.u64(c.seed);
  w.f64(c.norm_eps);
  w.f64(c.rope_base);
}

ModelConfig read_config(Reader& r) {
  ModelConfig c;
  c.layers = static_cast<int>(r.u32());
  c.hidden = static_cast<Index>(r.u64());
  c.heads = static_cast<Index>(r.u64());
  c.kv_heads = static_cast<Index>(r.u64());
  c.ffn_dim = static_cast<Index>(r.u64());
  c.vocab_size = static_cast<Index>(r.u64());
  c.max_seq_len = static_cast<Index>(r.u64());
  c.schedule.p_max = r.f64();
  const auto mode = r.u8();
  const auto variant = r.u8();
  const auto weight_mode = r.u8();
  const auto bits = r.u8();
  const auto hadamard = r.u8();
  if (mode > 1 || variant > 3 || weight_mode > 1 || hadamard > 1) {
    throw FormatError("checkpoint config holds invalid enum values");
  }
  c.schedule.mode = static_cast<ScheduleMode>(mode);
  c.schedule.layers = c.layers;
  c.variant = VariantConfig::of(static_cast<VariantName>(variant));
  const LinearFeatures stored{static_cast<WeightMode>(weight_mode), bits, hadamard == 1};
  if (stored != c.variant.features) throw FormatError("checkpoint variant features are inconsistent");
  c.seed = r.u64();
  c.norm_eps = r.f64();
  c.rope_base = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  return c;
}

bool same_shape(const ModelConfig& a, const ModelConfig& b) {
  return a.layers == b.layers && a.hidden == b.hidden && a.heads == b.heads && a.kv_heads == b.kv_heads &&
         a.ffn_dim == b.ffn_dim && a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const AdamState<float>& optimizer, std::int64_t step) {
  const auto params = model.parameters();
  if (optimizer.m.size() != params.size() || optimizer.v.size() != params.size()) {
    throw DimensionError("optimizer state does not match the model's parameters");
  }
  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  write_config(w, model.config);
  w.u64(static_cast<std::uint64_t>(step));
  w.u64(static_cast<std::uint64_t>(optimizer.step));
  w.u32(static_cast<std::uint32_t>(params.size() * 3));
  for (const auto& p : params) write_tensor(w, p.name, p.tensor.shape(), p.tensor.value());
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_tensor(w, "adam.m." + params[i].name, params[i].tensor.shape(), optimizer.m[i]);
    write_tensor(w, "adam.v." + params[i].name, params[i].tensor.shape(), optimizer.v[i]);
  }
  write_file_atomic(path, w.data());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  Reader r(read_file(path));
  char magic[sizeof(kCheckpointMagic)];
  if (r.remaining() < sizeof(magic)) throw FormatError("checkpoint is truncated");
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic bytes): " + path.string());
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const ModelConfig config = read_config(r);
  if (expected) {
    if (expected->variant.name != config.variant.name) {
      throw VariantMismatchError("checkpoint holds variant " + config.variant.label() + ", expected " +
                                 expected->variant.label());
    }
    if (!same_shape(*expected, config)) throw FormatError("checkpoint model shape differs from the config");
  }
  Checkpoint ckpt;
  ckpt.step = static_cast<std::int64_t>(r.u64());
  const auto adam_step = static_cast<std::int64_t>(r.u64());
  const auto count = r.u32();

  std::map<std::string, TensorRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u32();
    if (name_len > r.remaining()) throw FormatError("checkpoint is truncated");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("tensor " + name + " has invalid rank");
    TensorRecord rec;
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.u64();
      if (d == 0 || d > (1ULL << 32)) throw FormatError("tensor " + name + " has invalid dimension");
      rec.shape.push_back(static_cast<Index>(d));
      numel *= d;
    }
    if (numel * 4 > r.remaining()) throw FormatError("checkpoint is truncated");
    rec.values.resize(numel);
    for (auto& v : rec.values) v = r.f32();
    records.emplace(std::move(name), std::move(rec));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint records");

  ModelConfig build_cfg = config;
  ckpt.model = build_model<float>(build_cfg);
  const auto params = ckpt.model.parameters();
  const auto take = [&](const std::string& name, const Shape& shape) -> const TensorRecord& {
    const auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint lacks tensor " + name);
    if (it->second.shape != shape) {
      throw FormatError("tensor " + name + " has shape " + shape_string(it->second.shape) + ", model expects " +
                        shape_string(shape));
    }
    return it->second;
  };
  ckpt.optimizer.step = adam_step;
  for (const auto& p : params) {
    const auto& value = take(p.name, p.tensor.shape());
    auto t = p.tensor;
    std::memcpy(t.mutable_value().data(), value.values.data(), value.values.size() * sizeof(float));
    RowMatrix<float> m(p.tensor.rows(), p.tensor.cols());
    RowMatrix<float> v(p.tensor.rows(), p.tensor.cols());
    const auto& mr = take("adam.m." + p.name, p.tensor.shape());
    const auto& vr = take("adam.v." + p.name, p.tensor.shape());
    std::memcpy(m.data(), mr.values.data(), mr.values.size() * sizeof(float));
    std::memcpy(v.data(), vr.values.data(), vr.values.size() * sizeof(float));
    ckpt.optimizer.m.push_back(std::move(m));
    ckpt.optimizer.v.push_back(std::move(v));
  }
  if (records.size() != params.size() * 3) throw FormatError("checkpoint holds unexpected tensors");
  return ckpt;
}

}  // namespace bitskip
