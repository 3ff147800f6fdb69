#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "bayeslayers/sample.hpp"

namespace bayeslayers {

// ID training/test data and an OOD test set. OOD labels are bookkeeping only.
struct BenchmarkPairing {
  SampleSet id_train;
  SampleSet id_test;
  SampleSet ood_test;
  std::size_t class_count = 0;
  // Generator name and parameters, or source file digests.
  nlohmann::json provenance;
};

struct BlobsParams {
  std::uint64_t seed = 0;
  std::size_t class_count = 3;
  std::size_t n_per_class = 200;
  std::size_t dim = 2;
  double id_center_scale = 10.0;
  double ood_offset = 10.0;
};

// Class k is N(c_k, I) with c_k = id_center_scale * (cos 2pi k/K, sin 2pi k/K, 0, ...).
// The OOD cluster is N(o, I) with o = c_0 - ood_offset * c_0 / |c_0|: it sits
// ood_offset away from class 0, moving inward, so offset 0 puts it on top of
// class 0 and offset == id_center_scale puts it at the same distance from
// every ID centre. Each split gets n_per_class samples per class; the OOD
// set gets n_per_class samples labelled K.
BenchmarkPairing gen_blobs(const BlobsParams& params);

enum class ShapeKind { square, disk, cross, triangle, ring };
std::string_view to_string(ShapeKind kind);

struct ShapesParams {
  std::uint64_t seed = 0;
  std::size_t image_size = 28;
  std::size_t n_per_class = 300;
  std::size_t min_extent = 7;   // shape side in pixels, before rasterization
  std::size_t max_extent = 14;
};

// One filled shape per [1 x S x S] image on a faint noise background, pixels in
// [0, 1]. ID classes: square (0), disk (1), cross (2); OOD: triangle (3),
// ring (4). Boxes are the pixel bounding box of the rendered shape as
// [x_min, y_min, x_max + 1, y_max + 1].
BenchmarkPairing gen_shapes(const ShapesParams& params);

// Renders a single shape; exposed for tests. The box is written to `box`.
Tensor render_shape(ShapeKind kind, std::size_t image_size, std::size_t x0, std::size_t y0, std::size_t extent,
                    double intensity, Tensor& box);

// Samples with a label in id_labels become ID, relabelled densely in
// ascending label order; every fifth ID sample (by position) goes to id_test.
// The rest become ood_test. Throws std::invalid_argument unless id_labels is
// a non-empty proper subset of the observed labels.
BenchmarkPairing split_by_label(const SampleSet& collection, const std::set<std::size_t>& id_labels);

// FNV-1a 64-bit over raw bytes.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

// Writes <split>_inputs.idx (f64), <split>_labels.idx (u8), <split>_boxes.idx
// (f64, when boxes exist) for each split plus manifest.json, and returns the
// manifest. The directory must exist. Reading it back is lossless.
nlohmann::json write_pairing(const BenchmarkPairing& pairing, const std::filesystem::path& dir);

// Reads a manifest written by write_pairing and verifies its digest.
BenchmarkPairing read_pairing(const std::filesystem::path& manifest_path);

}  // namespace bayeslayers
