#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bayeslayers/network.hpp"
#include "bayeslayers/sample.hpp"

namespace bayeslayers {

// -log probs[target]. Throws std::out_of_range if target >= K.
double cross_entropy(const Tensor& probs, std::size_t target);

// cross_entropy(softmax(logits), target) evaluated as lse(logits) - logits[target].
double softmax_cross_entropy(const Tensor& logits, std::size_t target);

// Sum over coordinates of 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
double smooth_l1(const Tensor& pred, const Tensor& truth);

struct Target {
  std::size_t label = 0;
  std::optional<Tensor> box;
};

enum class NormMode {
  inference,         // batchnorm uses running statistics
  batch_statistics,  // batchnorm normalizes with the statistics of the batch
};

struct LossOptions {
  double box_loss_weight = 1.0;
  // Multiplies the whole objective; gradients scale with it.
  double loss_scale = 1.0;
  NormMode norm_mode = NormMode::inference;
};

// Mean over the batch of L_cls + box_loss_weight * L_reg, times loss_scale.
// Box terms are skipped when the model has no box head or the target has no box.
double sample_loss(const Model& model, const Prediction& prediction, const Target& target,
                   const LossOptions& options);

// Forward pass over a whole batch. In batch_statistics mode batchnorm layers
// couple the samples.
std::vector<Prediction> forward_batch(const Model& model, std::span<const Tensor> inputs, NormMode mode);

double batch_loss(const Model& model, std::span<const Tensor> inputs, std::span<const Target> targets,
                  const LossOptions& options);

// One tensor per model parameter, same nesting and shapes as Model::layers[i].params.
// Batchnorm running statistics get zero gradient.
using ParameterGrads = std::vector<std::vector<Tensor>>;

struct BatchNormStatistics {
  std::size_t layer = 0;
  Tensor mean;
  Tensor variance;
};

struct BackwardResult {
  double loss = 0.0;
  ParameterGrads grads;
  std::vector<BatchNormStatistics> batch_statistics;  // filled in batch_statistics mode
  std::size_t correct = 0;                            // argmax(logits) == label count
};

// Exact reverse-mode gradients of batch_loss. Throws DivergenceError when the
// loss is not finite.
BackwardResult backward(const Model& model, std::span<const Tensor> inputs, std::span<const Target> targets,
                        const LossOptions& options = {});

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double box_loss_weight = 1.0;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> curve;
};

// Mini-batch SGD with momentum and decoupled weight decay on params[0] of
// conv2d and linear layers:
//   v <- momentum * v + g
//   w <- w * (1 - lr * weight_decay) - lr * v
// Batchnorm runs in batch_statistics mode and updates its running averages
// with kBatchNormMomentum. Every sample must carry Provenance::id_train.
TrainResult train_sgd(Model model, std::span<const LabeledSample> data, const TrainConfig& config);

// Accuracy of argmax(logits) on a sample set, inference mode.
double classification_accuracy(const Model& model, std::span<const LabeledSample> data);

}  // namespace bayeslayers
