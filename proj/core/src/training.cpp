#include "bayeslayers/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "bayeslayers/errors.hpp"
#include "bayeslayers/ops.hpp"
#include "bayeslayers/rng.hpp"

namespace bayeslayers {

double cross_entropy(const Tensor& probs, std::size_t target) {
  if (target >= probs.size()) {
    throw std::out_of_range("target class " + std::to_string(target) + " out of range for " +
                            std::to_string(probs.size()) + " classes");
  }
  return -std::log(probs[target]);
}

double softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  if (target >= logits.size()) {
    throw std::out_of_range("target class " + std::to_string(target) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  return log_sum_exp(logits) - logits[target];
}

double smooth_l1(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) throw ShapeError("smooth_l1: shape mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = std::abs(pred[i] - truth[i]);
    sum += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return sum;
}

namespace {

bool uses_box(const Model& model, const Target& target) { return model.has_box_head && target.box.has_value(); }

std::size_t argmax(const Tensor& v) {
  return static_cast<std::size_t>(std::max_element(v.values().begin(), v.values().end()) - v.values().begin());
}

// Per-layer state kept by the batched forward pass for the backward pass.
struct LayerCache {
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<Tensor> normalized;  // batchnorm x-hat
  Tensor inv_std;                  // batchnorm, per channel
  bool batch_stats = false;
};

struct ForwardTrace {
  std::vector<LayerCache> layers;
  std::vector<Tensor> outputs;
  std::vector<BatchNormStatistics> batch_statistics;
};

void check_batch(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw std::invalid_argument("empty batch");
}

std::vector<Tensor> batchnorm_forward(const LayerSpec& layer, const std::vector<Tensor>& xs, NormMode mode,
                                      LayerCache& cache, std::vector<BatchNormStatistics>& stats,
                                      std::size_t layer_index) {
  const Tensor& scale = layer.params[0];
  const Tensor& shift = layer.params[1];
  const std::size_t channels = scale.size();
  for (const Tensor& x : xs) {
    if (x.rank() == 0 || x.dim(0) != channels) {
      throw ShapeError("layer '" + layer.name + "': expected " + std::to_string(channels) + " channels, got " +
                       shape_to_string(x.shape()));
    }
  }
  const std::size_t inner = xs.front().size() / channels;
  Tensor mean({channels}), var({channels});
  if (mode == NormMode::batch_statistics) {
    const double count = static_cast<double>(xs.size() * inner);
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (const Tensor& x : xs) {
        for (std::size_t i = 0; i < inner; ++i) s += x[c * inner + i];
      }
      mean[c] = s / count;
      double ss = 0.0;
      for (const Tensor& x : xs) {
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = x[c * inner + i] - mean[c];
          ss += d * d;
        }
      }
      var[c] = ss / count;
    }
    stats.push_back({layer_index, mean, var});
  } else {
    mean = layer.params[2];
    var = layer.params[3];
  }
  cache.batch_stats = mode == NormMode::batch_statistics;
  cache.inv_std = Tensor({channels});
  for (std::size_t c = 0; c < channels; ++c) cache.inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEpsilon);

  std::vector<Tensor> ys;
  ys.reserve(xs.size());
  cache.normalized.clear();
  for (const Tensor& x : xs) {
    Tensor xhat = x;
    Tensor y = x;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t k = c * inner + i;
        xhat[k] = (x[k] - mean[c]) * cache.inv_std[c];
        y[k] = scale[c] * xhat[k] + shift[c];
      }
    }
    cache.normalized.push_back(std::move(xhat));
    ys.push_back(std::move(y));
  }
  return ys;
}

ForwardTrace traced_forward(const Model& model, std::span<const Tensor> inputs, NormMode mode) {
  check_batch(inputs);
  ForwardTrace trace;
  trace.layers.resize(model.layers.size());
  std::vector<Tensor> xs(inputs.begin(), inputs.end());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const LayerSpec& layer = model.layers[li];
    LayerCache& cache = trace.layers[li];
    cache.inputs = xs;
    if (layer.kind == LayerKind::batchnorm) {
      xs = batchnorm_forward(layer, xs, mode, cache, trace.batch_statistics, li);
      continue;
    }
    if (layer.kind == LayerKind::maxpool2) {
      for (Tensor& x : xs) {
        cache.pool_argmax.push_back(max_pool2_argmax(x));
        x = max_pool2(x);
      }
      continue;
    }
    // Remaining kinds act per sample exactly as in inference.
    for (Tensor& x : xs) {
      try {
        switch (layer.kind) {
          case LayerKind::conv2d: {
            Tensor y = conv2d(x, layer.params[0], layer.stride, layer.padding);
            const std::size_t inner = y.size() / y.dim(0);
            for (std::size_t f = 0; f < y.dim(0); ++f) {
              for (std::size_t i = 0; i < inner; ++i) y[f * inner + i] += layer.params[1][f];
            }
            x = std::move(y);
            break;
          }
          case LayerKind::linear: {
            const Tensor& w = layer.params[0];
            if (x.rank() != 1 || x.size() != w.dim(1)) {
              throw ShapeError("expected input [" + std::to_string(w.dim(1)) + "], got " +
                               shape_to_string(x.shape()));
            }
            Tensor y({w.dim(0)});
            for (std::size_t o = 0; o < w.dim(0); ++o) {
              double acc = layer.params[1][o];
              for (std::size_t i = 0; i < w.dim(1); ++i) acc += w.at(o, i) * x[i];
              y[o] = acc;
            }
            x = std::move(y);
            break;
          }
          case LayerKind::relu: x = relu(x); break;
          case LayerKind::flatten: x = flatten(x); break;
          default: break;
        }
      } catch (const ShapeError& e) {
        throw ShapeError("layer '" + layer.name + "': " + e.what());
      }
    }
  }
  trace.outputs = std::move(xs);
  return trace;
}

}  // namespace

double sample_loss(const Model& model, const Prediction& prediction, const Target& target,
                   const LossOptions& options) {
  double loss = softmax_cross_entropy(prediction.logits, target.label);
  if (uses_box(model, target)) loss += options.box_loss_weight * smooth_l1(*prediction.box, *target.box);
  return loss * options.loss_scale;
}

std::vector<Prediction> forward_batch(const Model& model, std::span<const Tensor> inputs, NormMode mode) {
  ForwardTrace trace = traced_forward(model, inputs, mode);
  std::vector<Prediction> out;
  out.reserve(trace.outputs.size());
  for (const Tensor& y : trace.outputs) out.push_back(split_output(model, y));
  return out;
}

double batch_loss(const Model& model, std::span<const Tensor> inputs, std::span<const Target> targets,
                  const LossOptions& options) {
  if (inputs.size() != targets.size()) throw std::invalid_argument("inputs and targets differ in length");
  const auto predictions = forward_batch(model, inputs, options.norm_mode);
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) total += sample_loss(model, predictions[i], targets[i], options);
  return total / static_cast<double>(predictions.size());
}

BackwardResult backward(const Model& model, std::span<const Tensor> inputs, std::span<const Target> targets,
                        const LossOptions& options) {
  if (inputs.size() != targets.size()) throw std::invalid_argument("inputs and targets differ in length");
  ForwardTrace trace = traced_forward(model, inputs, options.norm_mode);
  const std::size_t batch = inputs.size();
  const double inv_batch = options.loss_scale / static_cast<double>(batch);

  BackwardResult result;
  result.batch_statistics = std::move(trace.batch_statistics);
  result.grads.resize(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (const Tensor& p : model.layers[li].params) result.grads[li].emplace_back(p.shape());
  }

  // Output gradients.
  std::vector<Tensor> grad(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const Prediction pred = split_output(model, trace.outputs[b]);
    const Target& target = targets[b];
    total += sample_loss(model, pred, target, options);
    if (argmax(pred.logits) == target.label) ++result.correct;
    const Tensor probs = softmax(pred.logits);
    Tensor g(trace.outputs[b].shape());
    for (std::size_t k = 0; k < model.class_count; ++k) {
      g[k] = (probs[k] - (k == target.label ? 1.0 : 0.0)) * inv_batch;
    }
    if (uses_box(model, target)) {
      for (std::size_t j = 0; j < 4; ++j) {
        const double d = (*pred.box)[j] - (*target.box)[j];
        g[model.class_count + j] = options.box_loss_weight * std::clamp(d, -1.0, 1.0) * inv_batch;
      }
    }
    grad[b] = std::move(g);
  }
  result.loss = total / static_cast<double>(batch);
  if (!std::isfinite(result.loss)) throw DivergenceError("non-finite loss " + std::to_string(result.loss));

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const LayerSpec& layer = model.layers[li];
    LayerCache& cache = trace.layers[li];
    auto& lg = result.grads[li];
    switch (layer.kind) {
      case LayerKind::linear: {
        const Tensor& w = layer.params[0];
        for (std::size_t b = 0; b < batch; ++b) {
          const Tensor& x = cache.inputs[b];
          Tensor dx({w.dim(1)});
          for (std::size_t o = 0; o < w.dim(0); ++o) {
            const double go = grad[b][o];
            lg[1][o] += go;
            if (go == 0.0) continue;
            for (std::size_t i = 0; i < w.dim(1); ++i) {
              lg[0].at(o, i) += go * x[i];
              dx[i] += go * w.at(o, i);
            }
          }
          grad[b] = std::move(dx);
        }
        break;
      }
      case LayerKind::conv2d: {
        for (std::size_t b = 0; b < batch; ++b) {
          Conv2dGrads cg = conv2d_backward(cache.inputs[b], layer.params[0], grad[b], layer.stride, layer.padding);
          for (std::size_t i = 0; i < cg.kernels.size(); ++i) lg[0][i] += cg.kernels[i];
          const std::size_t inner = grad[b].size() / grad[b].dim(0);
          for (std::size_t f = 0; f < grad[b].dim(0); ++f) {
            for (std::size_t i = 0; i < inner; ++i) lg[1][f] += grad[b][f * inner + i];
          }
          grad[b] = std::move(cg.input);
        }
        break;
      }
      case LayerKind::batchnorm: {
        const Tensor& scale = layer.params[0];
        const std::size_t channels = scale.size();
        const std::size_t inner = cache.inputs.front().size() / channels;
        // dscale, dshift
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t k = c * inner + i;
              lg[0][c] += grad[b][k] * cache.normalized[b][k];
              lg[1][c] += grad[b][k];
            }
          }
        }
        if (cache.batch_stats) {
          const double count = static_cast<double>(batch * inner);
          for (std::size_t c = 0; c < channels; ++c) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = c * inner + i;
                const double dxhat = grad[b][k] * scale[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * cache.normalized[b][k];
              }
            }
            for (std::size_t b = 0; b < batch; ++b) {
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = c * inner + i;
                const double dxhat = grad[b][k] * scale[c];
                grad[b][k] = cache.inv_std[c] / count *
                             (count * dxhat - sum_dxhat - cache.normalized[b][k] * sum_dxhat_xhat);
              }
            }
          }
        } else {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              for (std::size_t i = 0; i < inner; ++i) grad[b][c * inner + i] *= scale[c] * cache.inv_std[c];
            }
          }
        }
        break;
      }
      case LayerKind::relu: {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < grad[b].size(); ++i) {
            if (!(cache.inputs[b][i] > 0.0)) grad[b][i] = 0.0;
          }
        }
        break;
      }
      case LayerKind::maxpool2: {
        for (std::size_t b = 0; b < batch; ++b) {
          Tensor dx(cache.inputs[b].shape());
          const auto& idx = cache.pool_argmax[b];
          for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += grad[b][i];
          grad[b] = std::move(dx);
        }
        break;
      }
      case LayerKind::flatten: {
        for (std::size_t b = 0; b < batch; ++b) grad[b] = grad[b].reshaped(cache.inputs[b].shape());
        break;
      }
    }
  }
  return result;
}

void TrainConfig::validate() const {
  // Zero is allowed: it freezes the parameters.
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(box_loss_weight >= 0.0)) throw std::invalid_argument("box_loss_weight must be >= 0");
}

TrainResult train_sgd(Model model, std::span<const LabeledSample> data, const TrainConfig& config) {
  config.validate();
  model.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& s : data) {
    if (s.provenance != Provenance::id_train) {
      throw std::invalid_argument("training set contains a " + std::string(to_string(s.provenance)) + " sample");
    }
    if (s.label >= model.class_count) throw std::invalid_argument("training label out of range");
  }

  ParameterGrads velocity(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (const Tensor& p : model.layers[li].params) velocity[li].emplace_back(p.shape());
  }
  const LossOptions options{config.box_loss_weight, 1.0, NormMode::batch_statistics};
  const double decay_factor = 1.0 - config.learning_rate * config.weight_decay;

  std::vector<std::size_t> order(data.size());
  std::vector<Tensor> inputs;
  std::vector<Target> targets;
  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng::stream(config.seed, {0x5eed, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      inputs.clear();
      targets.clear();
      for (std::size_t i = start; i < end; ++i) {
        const LabeledSample& s = data[order[i]];
        inputs.push_back(s.input);
        targets.push_back({s.label, s.box});
      }
      BackwardResult step;
      try {
        step = backward(model, inputs, targets, options);
      } catch (const DivergenceError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch starting at " +
                              std::to_string(start) + ": " + e.what());
      } catch (const NonFiniteError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      loss_sum += step.loss * static_cast<double>(end - start);
      correct += step.correct;

      for (std::size_t li = 0; li < model.layers.size(); ++li) {
        LayerSpec& layer = model.layers[li];
        const std::size_t trainable = layer.kind == LayerKind::batchnorm ? 2 : layer.params.size();
        for (std::size_t pi = 0; pi < trainable; ++pi) {
          Tensor& p = layer.params[pi];
          Tensor& v = velocity[li][pi];
          const Tensor& g = step.grads[li][pi];
          const bool decays = pi == 0 && layer.kind != LayerKind::batchnorm;
          for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = config.momentum * v[k] + g[k];
            if (decays) p[k] *= decay_factor;
            p[k] -= config.learning_rate * v[k];
          }
        }
      }
      for (const auto& st : step.batch_statistics) {
        LayerSpec& layer = model.layers[st.layer];
        for (std::size_t c = 0; c < st.mean.size(); ++c) {
          layer.params[2][c] = kBatchNormMomentum * layer.params[2][c] + (1.0 - kBatchNormMomentum) * st.mean[c];
          layer.params[3][c] = kBatchNormMomentum * layer.params[3][c] + (1.0 - kBatchNormMomentum) * st.variance[c];
        }
      }
    }
    const double n = static_cast<double>(data.size());
    const EpochStats stats{epoch, loss_sum / n, static_cast<double>(correct) / n};
    if (!std::isfinite(stats.loss)) {
      throw DivergenceError("training diverged: epoch " + std::to_string(epoch) + " mean loss is not finite");
    }
    result.curve.push_back(stats);
  }
  for (const auto& layer : model.layers) {
    for (const auto& p : layer.params) {
      if (!p.all_finite()) throw DivergenceError("training diverged: parameters of '" + layer.name + "' not finite");
    }
  }
  result.model = std::move(model);
  return result;
}

double classification_accuracy(const Model& model, std::span<const LabeledSample> data) {
  if (data.empty()) throw std::invalid_argument("empty sample set");
  std::size_t correct = 0;
  for (const auto& s : data) {
    if (argmax(forward(model, s.input).logits) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace bayeslayers
