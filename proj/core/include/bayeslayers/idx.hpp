#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bayeslayers/sample.hpp"

namespace bayeslayers {

// IDX element type codes (third magic byte).
enum class IdxType : std::uint8_t {
  u8 = 0x08,
  i8 = 0x09,
  i16 = 0x0B,
  i32 = 0x0C,
  f32 = 0x0D,
  f64 = 0x0E,
};

// Decoded IDX file: big-endian magic 00 00 <type> <rank>, rank u32 extents,
// then raw big-endian elements. Values are widened to double unscaled.
struct IdxArray {
  IdxType type = IdxType::u8;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_idx(IdxType type, const std::vector<std::uint32_t>& dims,
                                     std::span<const double> values);
void write_idx(const std::filesystem::path& path, IdxType type, const std::vector<std::uint32_t>& dims,
               std::span<const double> values);

// Image file (magic 0x00000803, u8 pixels scaled by 1/255; f32 images with
// magic 0x00000D03 are taken as-is) paired with a label file (magic
// 0x00000801). Images become [1 x H x W] tensors. Provenance is id_train;
// split_by_label reassigns it.
SampleSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

}  // namespace bayeslayers
