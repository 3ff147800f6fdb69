#include "bayeslayers/idx.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <string>

#include "bayeslayers/errors.hpp"

namespace bayeslayers {

namespace {

std::size_t element_size(IdxType t) {
  switch (t) {
    case IdxType::u8:
    case IdxType::i8: return 1;
    case IdxType::i16: return 2;
    case IdxType::i32:
    case IdxType::f32: return 4;
    case IdxType::f64: return 8;
  }
  return 0;
}

bool known_type(std::uint8_t code) {
  return code == 0x08 || code == 0x09 || code == 0x0B || code == 0x0C || code == 0x0D || code == 0x0E;
}

std::uint64_t read_be(const std::uint8_t* p, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n; ++i) v = (v << 8) | p[i];
  return v;
}

void write_be(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t n) {
  for (std::size_t i = n; i-- > 0;) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0 || !known_type(bytes[2]) || bytes[3] == 0) {
    throw FormatError("bad magic in IDX data");
  }
  IdxArray a;
  a.type = static_cast<IdxType>(bytes[2]);
  const std::size_t rank = bytes[3];
  if (bytes.size() < 4 + 4 * rank) throw FormatError("truncated IDX header");
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(static_cast<std::uint32_t>(read_be(bytes.data() + 4 + 4 * i, 4)));
    count *= a.dims.back();
  }
  const std::size_t width = element_size(a.type);
  const std::size_t offset = 4 + 4 * rank;
  if ((bytes.size() - offset) / width < count) {
    throw FormatError("truncated IDX payload: expected " + std::to_string(count) + " elements");
  }
  if (bytes.size() - offset != count * width) throw FormatError("IDX payload has trailing bytes");
  a.values.resize(count);
  const std::uint8_t* p = bytes.data() + offset;
  for (std::size_t i = 0; i < count; ++i, p += width) {
    const std::uint64_t raw = read_be(p, width);
    switch (a.type) {
      case IdxType::u8: a.values[i] = static_cast<double>(raw); break;
      case IdxType::i8: a.values[i] = static_cast<std::int8_t>(raw); break;
      case IdxType::i16: a.values[i] = static_cast<std::int16_t>(raw); break;
      case IdxType::i32: a.values[i] = static_cast<std::int32_t>(raw); break;
      case IdxType::f32: a.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(raw)); break;
      case IdxType::f64: a.values[i] = std::bit_cast<double>(raw); break;
    }
  }
  return a;
}

IdxArray read_idx(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  try {
    return parse_idx(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_idx(IdxType type, const std::vector<std::uint32_t>& dims,
                                     std::span<const double> values) {
  if (dims.empty() || dims.size() > 255) throw std::invalid_argument("IDX rank must be in [1, 255]");
  std::size_t count = 1;
  for (auto d : dims) count *= d;
  if (count != values.size()) throw ShapeError("IDX extents do not match value count");
  std::vector<std::uint8_t> out{0, 0, static_cast<std::uint8_t>(type), static_cast<std::uint8_t>(dims.size())};
  for (auto d : dims) write_be(out, d, 4);
  const std::size_t width = element_size(type);
  out.reserve(out.size() + count * width);
  for (double v : values) {
    switch (type) {
      case IdxType::u8:
        if (!(v >= 0.0 && v <= 255.0) || v != static_cast<double>(static_cast<std::uint8_t>(v))) {
          throw std::invalid_argument("value not representable as u8");
        }
        out.push_back(static_cast<std::uint8_t>(v));
        break;
      case IdxType::i8: write_be(out, static_cast<std::uint8_t>(static_cast<std::int8_t>(v)), 1); break;
      case IdxType::i16: write_be(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)), 2); break;
      case IdxType::i32: write_be(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(v)), 4); break;
      case IdxType::f32: write_be(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); break;
      case IdxType::f64: write_be(out, std::bit_cast<std::uint64_t>(v), 8); break;
    }
  }
  return out;
}

void write_idx(const std::filesystem::path& path, IdxType type, const std::vector<std::uint32_t>& dims,
               std::span<const double> values) {
  const auto bytes = encode_idx(type, dims, values);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

SampleSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const IdxArray images = read_idx(images_path);
  const IdxArray labels = read_idx(labels_path);
  const bool u8_images = images.type == IdxType::u8;
  if (images.dims.size() != 3 || !(u8_images || images.type == IdxType::f32)) {
    throw FormatError(images_path.string() + ": bad magic, expected a 3-D image file (0x00000803)");
  }
  if (labels.dims.size() != 1 || labels.type != IdxType::u8) {
    throw FormatError(labels_path.string() + ": bad magic, expected a label file (0x00000801)");
  }
  if (images.dims[0] != labels.dims[0]) {
    throw ShapeError("image file holds " + std::to_string(images.dims[0]) + " images but label file holds " +
                     std::to_string(labels.dims[0]) + " labels");
  }
  const std::size_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
  SampleSet out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> pixels(images.values.begin() + static_cast<std::ptrdiff_t>(i * h * w),
                               images.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w));
    if (u8_images) {
      for (double& p : pixels) p /= 255.0;
    }
    out.push_back({Tensor({1, h, w}, std::move(pixels)), static_cast<std::size_t>(labels.values[i]), std::nullopt,
                   Provenance::id_train});
  }
  return out;
}

}  // namespace bayeslayers
