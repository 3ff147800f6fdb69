#include "bayeslayers/network.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "bayeslayers/errors.hpp"
#include "bayeslayers/ops.hpp"
#include "bayeslayers/rng.hpp"

namespace bayeslayers {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::flatten: return "flatten";
  }
  return "unknown";
}

LayerSpec make_conv2d(std::string name, Tensor kernels, Tensor bias, std::uint32_t stride, std::uint32_t padding) {
  return LayerSpec{std::move(name), LayerKind::conv2d, stride, padding, {std::move(kernels), std::move(bias)}};
}

LayerSpec make_linear(std::string name, Tensor weights, Tensor bias) {
  return LayerSpec{std::move(name), LayerKind::linear, 1, 0, {std::move(weights), std::move(bias)}};
}

LayerSpec make_batchnorm(std::string name, Tensor scale, Tensor shift, Tensor running_mean, Tensor running_var) {
  return LayerSpec{std::move(name),
                   LayerKind::batchnorm,
                   1,
                   0,
                   {std::move(scale), std::move(shift), std::move(running_mean), std::move(running_var)}};
}

LayerSpec make_relu(std::string name) { return LayerSpec{std::move(name), LayerKind::relu, 1, 0, {}}; }
LayerSpec make_maxpool2(std::string name) { return LayerSpec{std::move(name), LayerKind::maxpool2, 1, 0, {}}; }
LayerSpec make_flatten(std::string name) { return LayerSpec{std::move(name), LayerKind::flatten, 1, 0, {}}; }

std::optional<std::size_t> Model::find(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) {
    for (const auto& p : layer.params) n += p.size();
  }
  return n;
}

namespace {

void expect(bool ok, const LayerSpec& layer, const std::string& what) {
  if (!ok) throw ShapeError("layer '" + layer.name + "' (" + std::string(to_string(layer.kind)) + "): " + what);
}

void validate_layer(const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      expect(layer.params.size() == 2, layer, "expected kernels and bias");
      const Tensor& k = layer.params[0];
      expect(k.rank() == 4, layer, "kernels must be rank 4, got " + shape_to_string(k.shape()));
      expect(layer.params[1].shape() == Shape{k.dim(0)}, layer, "bias must have one entry per filter");
      expect(layer.stride > 0, layer, "stride must be positive");
      break;
    }
    case LayerKind::linear: {
      expect(layer.params.size() == 2, layer, "expected weights and bias");
      const Tensor& w = layer.params[0];
      expect(w.rank() == 2, layer, "weights must be rank 2, got " + shape_to_string(w.shape()));
      expect(layer.params[1].shape() == Shape{w.dim(0)}, layer, "bias must have one entry per output");
      break;
    }
    case LayerKind::batchnorm: {
      expect(layer.params.size() == 4, layer, "expected scale, shift, running mean, running variance");
      const Tensor& scale = layer.params[0];
      expect(scale.rank() == 1, layer, "scale must be rank 1");
      for (std::size_t i = 1; i < 4; ++i) {
        expect(layer.params[i].shape() == scale.shape(), layer, "batchnorm tensors must share one shape");
      }
      for (double v : layer.params[3].values()) expect(v > 0.0, layer, "running variance must be positive");
      break;
    }
    case LayerKind::relu:
    case LayerKind::maxpool2:
    case LayerKind::flatten:
      expect(layer.params.empty(), layer, "layer carries no parameters");
      break;
    default:
      throw std::invalid_argument("layer '" + layer.name + "': unknown kind");
  }
}

Tensor linear_forward(const Tensor& w, const Tensor& b, const Tensor& x) {
  if (x.rank() != 1 || x.size() != w.dim(1)) {
    throw ShapeError("expected input [" + std::to_string(w.dim(1)) + "], got " + shape_to_string(x.shape()));
  }
  const std::size_t out = w.dim(0), in = w.dim(1);
  Tensor y({out});
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b[o];
    const double* row = w.values().data() + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  require_finite(y, "linear output");
  return y;
}

Tensor batchnorm_inference(const LayerSpec& layer, const Tensor& scale, const Tensor& x) {
  const std::size_t channels = scale.size();
  if (x.rank() == 0 || x.dim(0) != channels) {
    throw ShapeError("expected " + std::to_string(channels) + " channels, got " + shape_to_string(x.shape()));
  }
  const Tensor& shift = layer.params[1];
  const Tensor& mean = layer.params[2];
  const Tensor& var = layer.params[3];
  const std::size_t inner = x.size() / channels;
  Tensor y = x;
  for (std::size_t c = 0; c < channels; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + kBatchNormEpsilon);
    for (std::size_t i = 0; i < inner; ++i) {
      double& v = y[c * inner + i];
      v = scale[c] * (v - mean[c]) * inv_std + shift[c];
    }
  }
  require_finite(y, "batchnorm output");
  return y;
}

Tensor apply_layer(const LayerSpec& layer, const Tensor& weights, const Tensor& x) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      Tensor y = conv2d(x, weights, layer.stride, layer.padding);
      const std::size_t inner = y.size() / y.dim(0);
      for (std::size_t f = 0; f < y.dim(0); ++f) {
        for (std::size_t i = 0; i < inner; ++i) y[f * inner + i] += layer.params[1][f];
      }
      return y;
    }
    case LayerKind::linear: return linear_forward(weights, layer.params[1], x);
    case LayerKind::batchnorm: return batchnorm_inference(layer, weights, x);
    case LayerKind::relu: return relu(x);
    case LayerKind::maxpool2: return max_pool2(x);
    case LayerKind::flatten: return flatten(x);
  }
  throw std::invalid_argument("unknown layer kind");
}

}  // namespace

void Model::validate() const {
  if (backbone_end > layers.size()) {
    throw std::invalid_argument("backbone_end " + std::to_string(backbone_end) + " exceeds layer count " +
                                std::to_string(layers.size()));
  }
  if (class_count == 0) throw std::invalid_argument("class count must be positive");
  std::set<std::string_view> names;
  for (const auto& layer : layers) {
    if (!names.insert(layer.name).second) throw std::invalid_argument("duplicate layer name '" + layer.name + "'");
    validate_layer(layer);
  }
}

Prediction split_output(const Model& model, const Tensor& output) {
  if (output.size() != model.output_size()) {
    throw ShapeError("model output has " + std::to_string(output.size()) + " values, expected " +
                     std::to_string(model.output_size()));
  }
  const auto v = output.values();
  Prediction p{Tensor::vector({v.begin(), v.begin() + static_cast<std::ptrdiff_t>(model.class_count)}),
               std::nullopt};
  if (model.has_box_head) {
    p.box = Tensor::vector({v.begin() + static_cast<std::ptrdiff_t>(model.class_count), v.end()});
  }
  return p;
}

Prediction forward(const Model& model, const Tensor& input) { return forward(model, input, {}); }

Prediction forward(const Model& model, const Tensor& input, std::span<const Tensor* const> weight_overrides) {
  if (!weight_overrides.empty() && weight_overrides.size() != model.layers.size()) {
    throw std::invalid_argument("weight override list must have one entry per layer");
  }
  require_finite(input, "model input");
  Tensor x = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec& layer = model.layers[i];
    const Tensor* override_weights = weight_overrides.empty() ? nullptr : weight_overrides[i];
    try {
      if (layer.has_weights()) {
        const Tensor& w = override_weights ? *override_weights : layer.weights();
        if (w.shape() != layer.weights().shape()) throw ShapeError("override weights have the wrong shape");
        x = apply_layer(layer, w, x);
      } else {
        x = apply_layer(layer, Tensor{}, x);
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer '" + layer.name + "': " + e.what());
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("layer '" + layer.name + "': " + e.what());
    }
  }
  return split_output(model, x);
}

Architecture parse_architecture(std::string_view name) {
  if (name == "micro-mlp") return Architecture::micro_mlp;
  if (name == "micro-cnn") return Architecture::micro_cnn;
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

std::string_view to_string(Architecture arch) {
  return arch == Architecture::micro_mlp ? "micro-mlp" : "micro-cnn";
}

namespace {

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in, double gain) {
  Tensor t(std::move(shape));
  const double sigma = std::sqrt(gain / static_cast<double>(fan_in));
  for (double& v : t.values()) v = gauss_sample(rng, 0.0, sigma);
  return t;
}

LayerSpec init_linear(Rng& rng, std::string name, std::size_t in, std::size_t out, double gain) {
  return make_linear(std::move(name), he_normal(rng, {out, in}, in, gain), Tensor({out}));
}

LayerSpec init_conv(Rng& rng, std::string name, std::size_t in_ch, std::size_t filters) {
  return make_conv2d(std::move(name), he_normal(rng, {filters, in_ch, 3, 3}, in_ch * 9, 2.0), Tensor({filters}), 1,
                     1);
}

}  // namespace

Model make_preset(Architecture arch, const Shape& input_shape, std::size_t class_count, bool has_box_head,
                  std::uint64_t seed) {
  if (class_count == 0) throw std::invalid_argument("class count must be positive");
  Rng rng = Rng::stream(seed, {0x1417});
  Model m;
  m.class_count = class_count;
  m.has_box_head = has_box_head;
  const std::size_t outputs = m.output_size();
  constexpr std::size_t hidden = 64;

  if (arch == Architecture::micro_mlp) {
    const std::size_t in = shape_volume(input_shape);
    if (input_shape.empty() || in == 0) throw ShapeError("micro-mlp needs a non-empty input shape");
    m.layers.push_back(make_flatten("flatten"));
    m.layers.push_back(init_linear(rng, "fc1", in, hidden, 2.0));
    m.layers.push_back(make_relu("relu1"));
  } else {
    if (input_shape.size() != 3) throw ShapeError("micro-cnn needs a [C x H x W] input shape");
    const std::size_t h = input_shape[1] / 2 / 2, w = input_shape[2] / 2 / 2;
    if (h == 0 || w == 0) throw ShapeError("micro-cnn input too small: " + shape_to_string(input_shape));
    m.layers.push_back(init_conv(rng, "conv1", input_shape[0], 8));
    m.layers.push_back(make_relu("relu1"));
    m.layers.push_back(make_maxpool2("pool1"));
    m.layers.push_back(init_conv(rng, "conv2", 8, 16));
    m.layers.push_back(make_relu("relu2"));
    m.layers.push_back(make_maxpool2("pool2"));
    m.layers.push_back(make_flatten("flatten"));
    m.layers.push_back(init_linear(rng, "fc1", 16 * h * w, hidden, 2.0));
    m.layers.push_back(make_relu("relu3"));
  }
  m.backbone_end = m.layers.size();
  m.layers.push_back(init_linear(rng, "head", hidden, outputs, 1.0));
  m.validate();
  return m;
}

}  // namespace bayeslayers
