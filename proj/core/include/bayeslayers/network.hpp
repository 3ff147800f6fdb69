#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bayeslayers/tensor.hpp"

namespace bayeslayers {

// Numeric values are the persisted kind codes.
enum class LayerKind : std::uint8_t {
  conv2d = 0,
  linear = 1,
  batchnorm = 2,
  relu = 3,
  maxpool2 = 4,
  flatten = 5,
};

std::string_view to_string(LayerKind kind);

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// Parameter tensor layout per kind:
//   conv2d    {kernels [F x C x kh x kw], bias [F]}
//   linear    {weights [out x in], bias [out]}
//   batchnorm {scale [C], shift [C], running_mean [C], running_var [C]}
//   others    {}
// params[0] is the layer's weight tensor: the part that weight decay and the
// Bayesian posteriors act on.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  std::uint32_t stride = 1;
  std::uint32_t padding = 0;
  std::vector<Tensor> params;

  bool has_weights() const {
    return kind == LayerKind::conv2d || kind == LayerKind::linear || kind == LayerKind::batchnorm;
  }
  const Tensor& weights() const { return params.at(0); }
  Tensor& weights() { return params.at(0); }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

LayerSpec make_conv2d(std::string name, Tensor kernels, Tensor bias, std::uint32_t stride = 1,
                      std::uint32_t padding = 0);
LayerSpec make_linear(std::string name, Tensor weights, Tensor bias);
LayerSpec make_batchnorm(std::string name, Tensor scale, Tensor shift, Tensor running_mean, Tensor running_var);
LayerSpec make_relu(std::string name);
LayerSpec make_maxpool2(std::string name);
LayerSpec make_flatten(std::string name);

// Ordered layers; layers [0, backbone_end) form the backbone, the rest the
// head. The final activation is read as K class logits followed by 4 box
// coordinates when has_box_head is set.
struct Model {
  std::vector<LayerSpec> layers;
  std::size_t backbone_end = 0;
  std::size_t class_count = 0;
  bool has_box_head = false;

  std::size_t output_size() const { return class_count + (has_box_head ? 4 : 0); }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t parameter_count() const;

  // Throws ShapeError / std::invalid_argument on any broken invariant.
  void validate() const;

  friend bool operator==(const Model&, const Model&) = default;
};

struct Prediction {
  Tensor logits;
  std::optional<Tensor> box;
};

// Inference-mode forward pass. Batchnorm uses its running statistics.
Prediction forward(const Model& model, const Tensor& input);

// Forward pass in which layer i uses *weight_overrides[i] in place of its
// params[0] whenever that pointer is non-null. The span is either empty or
// has one entry per layer.
Prediction forward(const Model& model, const Tensor& input, std::span<const Tensor* const> weight_overrides);

// Splits a flat output activation into logits and optional box.
Prediction split_output(const Model& model, const Tensor& output);

enum class Architecture { micro_mlp, micro_cnn };

Architecture parse_architecture(std::string_view name);
std::string_view to_string(Architecture arch);

// Freshly initialized preset. `input_shape` is [D] (any rank, flattened) for
// micro-mlp and [C x H x W] for micro-cnn. He-normal weights, zero biases.
//   micro-mlp: flatten, fc1 (64), relu1 | head
//   micro-cnn: conv1 8@3x3, relu1, pool1, conv2 16@3x3, relu2, pool2,
//              flatten, fc1 (64), relu3 | head
// '|' marks backbone_end.
Model make_preset(Architecture arch, const Shape& input_shape, std::size_t class_count, bool has_box_head,
                  std::uint64_t seed);

}  // namespace bayeslayers
