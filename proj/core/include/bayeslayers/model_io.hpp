#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bayeslayers/network.hpp"

namespace bayeslayers {

// BLYR container, little-endian:
//   "BLYR" | u32 version=1 | u32 K | u8 has_box_head | u32 backbone_end | u32 layer_count
//   per layer: u16 name_len, name bytes, u8 kind, u32 stride, u32 padding,
//              u8 tensor_count, per tensor: u8 rank, u32 dims[rank], f32 values[]
inline constexpr std::uint32_t kModelFormatVersion = 1;

std::vector<std::uint8_t> serialize_model(const Model& model);

// Throws FormatError ("bad magic", "unsupported version", "truncated payload",
// "duplicate layer name", ...).
Model deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Rounds every parameter to the persisted 32-bit width in place, so the
// in-memory model equals what load_model would return.
void round_to_storage_precision(Model& model);

}  // namespace bayeslayers
