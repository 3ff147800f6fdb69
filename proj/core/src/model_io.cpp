#include "bayeslayers/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>

#include "bayeslayers/errors.hpp"

namespace bayeslayers {

namespace {

constexpr std::uint8_t kMagic[4] = {0x42, 0x4C, 0x59, 0x52};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw FormatError("truncated payload at byte " + std::to_string(pos_));
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw FormatError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  model.validate();
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kModelFormatVersion);
  w.u32(checked_u32(model.class_count, "class count"));
  w.u8(model.has_box_head ? 1 : 0);
  w.u32(checked_u32(model.backbone_end, "backbone_end"));
  w.u32(checked_u32(model.layers.size(), "layer count"));
  for (const auto& layer : model.layers) {
    if (layer.name.size() > 0xFFFF) throw FormatError("layer name too long");
    w.u16(static_cast<std::uint16_t>(layer.name.size()));
    w.bytes(layer.name.data(), layer.name.size());
    w.u8(static_cast<std::uint8_t>(layer.kind));
    w.u32(layer.stride);
    w.u32(layer.padding);
    if (layer.params.size() > 0xFF) throw FormatError("too many tensors in layer");
    w.u8(static_cast<std::uint8_t>(layer.params.size()));
    for (const auto& t : layer.params) {
      if (t.rank() > 0xFF) throw FormatError("tensor rank too large");
      w.u8(static_cast<std::uint8_t>(t.rank()));
      for (std::size_t d : t.shape()) w.u32(checked_u32(d, "tensor extent"));
      for (double v : t.values()) w.f32(static_cast<float>(v));
    }
  }
  return w.take();
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic");
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kModelFormatVersion) + ")");
  }
  Model m;
  m.class_count = r.u32();
  const std::uint8_t box = r.u8();
  if (box > 1) throw FormatError("has_box_head flag must be 0 or 1");
  m.has_box_head = box == 1;
  m.backbone_end = r.u32();
  const std::uint32_t layer_count = r.u32();
  std::set<std::string> names;
  for (std::uint32_t li = 0; li < layer_count; ++li) {
    LayerSpec layer;
    layer.name = r.str(r.u16());
    if (!names.insert(layer.name).second) throw FormatError("duplicate layer name '" + layer.name + "'");
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::flatten)) {
      throw FormatError("unknown layer kind code " + std::to_string(kind));
    }
    layer.kind = static_cast<LayerKind>(kind);
    layer.stride = r.u32();
    layer.padding = r.u32();
    const std::uint8_t tensor_count = r.u8();
    for (std::uint8_t ti = 0; ti < tensor_count; ++ti) {
      Shape shape(r.u8());
      std::size_t volume = 1;
      for (auto& d : shape) {
        d = r.u32();
        if (d == 0) throw FormatError("zero tensor extent in layer '" + layer.name + "'");
        volume *= d;
        if (volume > r.remaining() / 4) throw FormatError("truncated payload in layer '" + layer.name + "'");
      }
      std::vector<double> values(volume);
      for (double& v : values) v = static_cast<double>(r.f32());
      layer.params.emplace_back(std::move(shape), std::move(values));
    }
    m.layers.push_back(std::move(layer));
  }
  if (!r.done()) throw FormatError("trailing bytes after last layer");
  if (m.class_count == 0) throw FormatError("class count must be positive");
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid model: ") + e.what());
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

void round_to_storage_precision(Model& model) {
  for (auto& layer : model.layers) {
    for (auto& t : layer.params) {
      for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
    }
  }
}

}  // namespace bayeslayers
