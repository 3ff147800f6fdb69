#include "bayeslayers/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <stdexcept>

#include "bayeslayers/errors.hpp"
#include "bayeslayers/idx.hpp"
#include "bayeslayers/rng.hpp"

namespace bayeslayers {

namespace {

constexpr std::uint64_t kTrainStream = 1, kTestStream = 2, kOodStream = 3;

std::vector<double> blob_center(std::size_t k, std::size_t class_count, std::size_t dim, double scale) {
  std::vector<double> c(dim, 0.0);
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(class_count);
  c[0] = scale * std::cos(angle);
  c[1] = scale * std::sin(angle);
  return c;
}

void append_cluster(SampleSet& out, std::uint64_t seed, std::uint64_t stream, std::size_t cluster,
                    const std::vector<double>& center, std::size_t count, std::size_t label, Provenance provenance) {
  Rng rng = Rng::stream(seed, {stream, cluster});
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> x(center.size());
    for (std::size_t d = 0; d < x.size(); ++d) x[d] = center[d] + rng.normal();
    out.push_back({Tensor::vector(std::move(x)), label, std::nullopt, provenance});
  }
}

}  // namespace

BenchmarkPairing gen_blobs(const BlobsParams& p) {
  if (p.class_count < 2) throw std::invalid_argument("gen_blobs: need at least 2 classes");
  if (p.dim < 2) throw std::invalid_argument("gen_blobs: need dim >= 2");
  if (p.n_per_class == 0) throw std::invalid_argument("gen_blobs: n_per_class must be positive");
  if (!(p.id_center_scale > 0.0) || !(p.ood_offset >= 0.0)) {
    throw std::invalid_argument("gen_blobs: id_center_scale must be positive and ood_offset non-negative");
  }
  BenchmarkPairing out;
  out.class_count = p.class_count;
  for (std::size_t k = 0; k < p.class_count; ++k) {
    const auto c = blob_center(k, p.class_count, p.dim, p.id_center_scale);
    append_cluster(out.id_train, p.seed, kTrainStream, k, c, p.n_per_class, k, Provenance::id_train);
    append_cluster(out.id_test, p.seed, kTestStream, k, c, p.n_per_class, k, Provenance::id_test);
  }
  auto ood_center = blob_center(0, p.class_count, p.dim, p.id_center_scale);
  const double shrink = p.ood_offset / p.id_center_scale;
  for (double& v : ood_center) v -= shrink * v;
  append_cluster(out.ood_test, p.seed, kOodStream, 0, ood_center, p.n_per_class, p.class_count,
                 Provenance::ood_test);
  out.provenance = {{"generator", "blobs"},
                    {"seed", p.seed},
                    {"parameters",
                     {{"class_count", p.class_count},
                      {"n_per_class", p.n_per_class},
                      {"dim", p.dim},
                      {"id_center_scale", p.id_center_scale},
                      {"ood_offset", p.ood_offset}}}};
  return out;
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::square: return "square";
    case ShapeKind::disk: return "disk";
    case ShapeKind::cross: return "cross";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::ring: return "ring";
  }
  return "unknown";
}

Tensor render_shape(ShapeKind kind, std::size_t image_size, std::size_t x0, std::size_t y0, std::size_t extent,
                    double intensity, Tensor& box) {
  if (extent == 0 || x0 + extent > image_size || y0 + extent > image_size) {
    throw std::invalid_argument("shape does not fit: extent " + std::to_string(extent) + " at (" +
                                std::to_string(x0) + ", " + std::to_string(y0) + ") in a " +
                                std::to_string(image_size) + " pixel image");
  }
  Tensor img({1, image_size, image_size});
  const double a = static_cast<double>(extent);
  const double cx = static_cast<double>(x0) + a / 2.0, cy = static_cast<double>(y0) + a / 2.0;
  const double r = a / 2.0;
  std::size_t min_x = image_size, min_y = image_size, max_x = 0, max_y = 0;
  bool any = false;
  for (std::size_t y = y0; y < y0 + extent; ++y) {
    for (std::size_t x = x0; x < x0 + extent; ++x) {
      const double px = static_cast<double>(x) + 0.5 - cx, py = static_cast<double>(y) + 0.5 - cy;
      const double d2 = px * px + py * py;
      bool inside = false;
      switch (kind) {
        case ShapeKind::square: inside = true; break;
        case ShapeKind::disk: inside = d2 <= r * r; break;
        case ShapeKind::cross: inside = std::abs(px) <= a / 6.0 || std::abs(py) <= a / 6.0; break;
        case ShapeKind::triangle: {
          // Apex at the top centre, base along the bottom edge.
          const double depth = (static_cast<double>(y) + 0.5 - static_cast<double>(y0)) / a;
          inside = std::abs(px) <= depth * r;
          break;
        }
        case ShapeKind::ring: inside = d2 <= r * r && d2 >= 0.3 * r * r; break;
      }
      if (!inside) continue;
      any = true;
      img.at(0, y, x) = intensity;
      min_x = std::min(min_x, x);
      min_y = std::min(min_y, y);
      max_x = std::max(max_x, x);
      max_y = std::max(max_y, y);
    }
  }
  if (!any) throw std::invalid_argument("shape rasterized to no pixels");
  box = Tensor::vector({static_cast<double>(min_x), static_cast<double>(min_y), static_cast<double>(max_x + 1),
                        static_cast<double>(max_y + 1)});
  return img;
}

namespace {

void append_shapes(SampleSet& out, const ShapesParams& p, std::uint64_t stream, ShapeKind kind, std::size_t label,
                   Provenance provenance) {
  Rng rng = Rng::stream(p.seed, {stream, static_cast<std::uint64_t>(kind)});
  const std::size_t s = p.image_size;
  for (std::size_t i = 0; i < p.n_per_class; ++i) {
    const std::size_t extent = p.min_extent + rng.below(p.max_extent - p.min_extent + 1);
    const std::size_t x0 = rng.below(s - extent + 1);
    const std::size_t y0 = rng.below(s - extent + 1);
    const double intensity = 0.6 + 0.4 * rng.uniform();
    Tensor box;
    Tensor img = render_shape(kind, s, x0, y0, extent, intensity, box);
    for (double& v : img.values()) v = std::max(v, 0.1 * rng.uniform());
    out.push_back({std::move(img), label, std::move(box), provenance});
  }
}

}  // namespace

BenchmarkPairing gen_shapes(const ShapesParams& p) {
  if (p.image_size < 16) throw std::invalid_argument("gen_shapes: image_size must be at least 16");
  if (p.n_per_class == 0) throw std::invalid_argument("gen_shapes: n_per_class must be positive");
  if (p.min_extent < 3 || p.min_extent > p.max_extent) {
    throw std::invalid_argument("gen_shapes: need 3 <= min_extent <= max_extent");
  }
  if (p.max_extent > p.image_size) {
    throw std::invalid_argument("shape does not fit: max_extent " + std::to_string(p.max_extent) +
                                " exceeds image size " + std::to_string(p.image_size));
  }
  BenchmarkPairing out;
  out.class_count = 3;
  constexpr ShapeKind id_shapes[] = {ShapeKind::square, ShapeKind::disk, ShapeKind::cross};
  constexpr ShapeKind ood_shapes[] = {ShapeKind::triangle, ShapeKind::ring};
  for (std::size_t k = 0; k < 3; ++k) {
    append_shapes(out.id_train, p, kTrainStream, id_shapes[k], k, Provenance::id_train);
    append_shapes(out.id_test, p, kTestStream, id_shapes[k], k, Provenance::id_test);
  }
  for (std::size_t k = 0; k < 2; ++k) {
    append_shapes(out.ood_test, p, kOodStream, ood_shapes[k], 3 + k, Provenance::ood_test);
  }
  out.provenance = {{"generator", "shapes"},
                    {"seed", p.seed},
                    {"parameters",
                     {{"image_size", p.image_size},
                      {"n_per_class", p.n_per_class},
                      {"min_extent", p.min_extent},
                      {"max_extent", p.max_extent}}}};
  return out;
}

BenchmarkPairing split_by_label(const SampleSet& collection, const std::set<std::size_t>& id_labels) {
  if (id_labels.empty()) throw std::invalid_argument("split_by_label: id_labels is empty");
  std::set<std::size_t> observed;
  for (const auto& s : collection) observed.insert(s.label);
  for (std::size_t l : id_labels) {
    if (!observed.contains(l)) throw std::invalid_argument("split_by_label: label " + std::to_string(l) + " not observed");
  }
  if (id_labels.size() == observed.size()) {
    throw std::invalid_argument("split_by_label: id_labels covers every observed label, no OOD samples remain");
  }
  std::map<std::size_t, std::size_t> dense;
  for (std::size_t l : id_labels) dense.emplace(l, dense.size());

  BenchmarkPairing out;
  out.class_count = id_labels.size();
  std::size_t id_seen = 0;
  for (const auto& s : collection) {
    LabeledSample copy = s;
    if (auto it = dense.find(s.label); it != dense.end()) {
      copy.label = it->second;
      const bool test = id_seen++ % 5 == 4;
      copy.provenance = test ? Provenance::id_test : Provenance::id_train;
      (test ? out.id_test : out.id_train).push_back(std::move(copy));
    } else {
      copy.provenance = Provenance::ood_test;
      out.ood_test.push_back(std::move(copy));
    }
  }
  out.provenance = {{"generator", "split_by_label"},
                    {"id_labels", std::vector<std::size_t>(id_labels.begin(), id_labels.end())}};
  return out;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash) {
  for (std::uint8_t b : bytes) {
    hash ^= b;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

namespace {

constexpr const char* kSplitNames[] = {"id_train", "id_test", "ood_test"};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<std::uint32_t> to_dims(std::size_t n, const Shape& shape) {
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(n)};
  for (std::size_t d : shape) dims.push_back(static_cast<std::uint32_t>(d));
  return dims;
}

}  // namespace

nlohmann::json write_pairing(const BenchmarkPairing& pairing, const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("output directory '" + dir.string() + "' does not exist");
  const SampleSet* splits[] = {&pairing.id_train, &pairing.id_test, &pairing.ood_test};
  nlohmann::json manifest;
  manifest["format"] = "bayeslayers.dataset/1";
  manifest["provenance"] = pairing.provenance;
  manifest["class_count"] = pairing.class_count;
  std::uint64_t digest = 0xcbf29ce484222325ULL;
  for (std::size_t si = 0; si < 3; ++si) {
    const SampleSet& set = *splits[si];
    const std::string name = kSplitNames[si];
    nlohmann::json entry;
    entry["count"] = set.size();
    if (set.empty()) {
      manifest["splits"][name] = entry;
      continue;
    }
    const Shape& shape = set.front().input.shape();
    const bool boxes = set.front().box.has_value();
    std::vector<double> inputs, labels, box_values;
    for (const auto& s : set) {
      if (s.input.shape() != shape) throw ShapeError("split '" + name + "' mixes input shapes");
      if (s.box.has_value() != boxes) throw std::invalid_argument("split '" + name + "' mixes boxed and unboxed samples");
      inputs.insert(inputs.end(), s.input.values().begin(), s.input.values().end());
      labels.push_back(static_cast<double>(s.label));
      if (boxes) box_values.insert(box_values.end(), s.box->values().begin(), s.box->values().end());
    }
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
    files.emplace_back(name + "_inputs.idx", encode_idx(IdxType::f64, to_dims(set.size(), shape), inputs));
    files.emplace_back(name + "_labels.idx", encode_idx(IdxType::u8, to_dims(set.size(), {}), labels));
    if (boxes) files.emplace_back(name + "_boxes.idx", encode_idx(IdxType::f64, to_dims(set.size(), {4}), box_values));
    entry["inputs"] = files[0].first;
    entry["labels"] = files[1].first;
    if (boxes) entry["boxes"] = files[2].first;
    entry["sample_shape"] = shape;
    for (const auto& [file, bytes] : files) {
      spit(dir / file, bytes);
      digest = fnv1a64(bytes, digest);
    }
    manifest["splits"][name] = entry;
  }
  manifest["digest"] = "fnv1a64:" + hex64(digest);
  const std::string text = manifest.dump(2) + "\n";
  spit(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  return manifest;
}

BenchmarkPairing read_pairing(const std::filesystem::path& manifest_path) {
  const auto raw = slurp(manifest_path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  BenchmarkPairing out;
  try {
    if (manifest.at("format") != "bayeslayers.dataset/1") throw FormatError("unsupported dataset manifest format");
    out.class_count = manifest.at("class_count").get<std::size_t>();
    out.provenance = manifest.at("provenance");
    SampleSet* splits[] = {&out.id_train, &out.id_test, &out.ood_test};
    const Provenance tags[] = {Provenance::id_train, Provenance::id_test, Provenance::ood_test};
    std::uint64_t digest = 0xcbf29ce484222325ULL;
    for (std::size_t si = 0; si < 3; ++si) {
      const auto& entry = manifest.at("splits").at(kSplitNames[si]);
      const std::size_t count = entry.at("count").get<std::size_t>();
      if (count == 0) continue;
      const auto shape = entry.at("sample_shape").get<Shape>();
      const auto input_bytes = slurp(dir / entry.at("inputs").get<std::string>());
      const auto label_bytes = slurp(dir / entry.at("labels").get<std::string>());
      digest = fnv1a64(input_bytes, digest);
      digest = fnv1a64(label_bytes, digest);
      const IdxArray inputs = parse_idx(input_bytes);
      const IdxArray labels = parse_idx(label_bytes);
      IdxArray boxes;
      const bool has_boxes = entry.contains("boxes");
      if (has_boxes) {
        const auto box_bytes = slurp(dir / entry.at("boxes").get<std::string>());
        digest = fnv1a64(box_bytes, digest);
        boxes = parse_idx(box_bytes);
      }
      const std::size_t volume = shape_volume(shape);
      if (inputs.values.size() != count * volume || labels.values.size() != count ||
          (has_boxes && boxes.values.size() != count * 4)) {
        throw FormatError("split '" + std::string(kSplitNames[si]) + "' does not match its manifest entry");
      }
      for (std::size_t i = 0; i < count; ++i) {
        LabeledSample s;
        s.input = Tensor(shape, std::vector<double>(inputs.values.begin() + static_cast<std::ptrdiff_t>(i * volume),
                                                    inputs.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * volume)));
        s.label = static_cast<std::size_t>(labels.values[i]);
        if (has_boxes) {
          s.box = Tensor::vector({boxes.values.begin() + static_cast<std::ptrdiff_t>(i * 4),
                                  boxes.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * 4)});
        }
        s.provenance = tags[si];
        splits[si]->push_back(std::move(s));
      }
    }
    if (manifest.at("digest") != "fnv1a64:" + hex64(digest)) {
      throw FormatError("dataset digest mismatch: files changed since the manifest was written");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

}  // namespace bayeslayers
