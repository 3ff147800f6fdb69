#include "bayeslayers/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bayeslayers/chi_square.hpp"
#include "bayeslayers/errors.hpp"
#include "bayeslayers/ops.hpp"
#include "bayeslayers/parallel.hpp"

namespace bayeslayers {

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::none: return "none";
    case PolicyKind::conv_backbone: return "conv_backbone";
    case PolicyKind::linear_backbone: return "linear_backbone";
    case PolicyKind::conv_all: return "conv_all";
    case PolicyKind::linear_all: return "linear_all";
    case PolicyKind::full: return "full";
  }
  return "unknown";
}

PolicyKind parse_policy(std::string_view name) {
  for (PolicyKind k : kAllPolicies) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown selection policy '" + std::string(name) + "'");
}

namespace {

bool policy_selects(PolicyKind kind, const LayerSpec& layer, bool in_backbone) {
  switch (kind) {
    case PolicyKind::none: return false;
    case PolicyKind::conv_backbone: return layer.kind == LayerKind::conv2d && in_backbone;
    case PolicyKind::linear_backbone: return layer.kind == LayerKind::linear && in_backbone;
    case PolicyKind::conv_all: return layer.kind == LayerKind::conv2d;
    case PolicyKind::linear_all: return layer.kind == LayerKind::linear;
    case PolicyKind::full: return layer.has_weights();
  }
  return false;
}

}  // namespace

std::vector<std::string> select_layers(const Model& model, const SelectionPolicy& policy) {
  std::vector<std::string> selected;
  if (!policy.explicit_layers.empty()) {
    std::vector<std::size_t> indices;
    for (const auto& name : policy.explicit_layers) {
      const auto index = model.find(name);
      if (!index) throw std::invalid_argument("layer '" + name + "' not found in model");
      const LayerSpec& layer = model.layers[*index];
      if (layer.kind != LayerKind::conv2d && layer.kind != LayerKind::linear) {
        throw std::invalid_argument("layer '" + name + "' (" + std::string(to_string(layer.kind)) +
                                    ") cannot be made Bayesian");
      }
      indices.push_back(*index);
    }
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    for (std::size_t i : indices) selected.push_back(model.layers[i].name);
    return selected;
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (policy_selects(policy.kind, model.layers[i], i < model.backbone_end)) selected.push_back(model.layers[i].name);
  }
  return selected;
}

std::vector<GaussianLayerPosterior> build_posteriors(const Model& model, const std::vector<std::string>& selection,
                                                     double alpha, double epsilon_quantile) {
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
  if (!(epsilon_quantile >= 0.0 && epsilon_quantile < 1.0)) {
    throw std::invalid_argument("epsilon quantile must lie in [0, 1)");
  }
  std::vector<GaussianLayerPosterior> posteriors;
  posteriors.reserve(selection.size());
  for (const auto& name : selection) {
    const auto index = model.find(name);
    if (!index) throw std::invalid_argument("layer '" + name + "' not found in model");
    const LayerSpec& layer = model.layers[*index];
    if (!layer.has_weights() || layer.params.empty()) {
      throw std::invalid_argument("layer '" + name + "' has no weight parameters");
    }
    const Tensor& w = layer.weights();
    if (w.empty()) throw std::invalid_argument("layer '" + name + "' has zero parameters");
    double ss = 0.0;
    for (double v : w.values()) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(w.size()));

    GaussianLayerPosterior post;
    post.layer_name = name;
    post.layer_index = *index;
    post.mean = w;
    post.sigma = alpha * std::max(rms, kSigmaFloor);
    post.dimension = w.size();
    post.epsilon_quantile = epsilon_quantile;
    post.radius2_threshold = chi_square_quantile(static_cast<unsigned>(post.dimension), epsilon_quantile);
    posteriors.push_back(std::move(post));
  }
  return posteriors;
}

double mahalanobis_radius2(const Tensor& theta, const Tensor& mean, double sigma) {
  if (theta.shape() != mean.shape()) throw ShapeError("mahalanobis_radius2: shape mismatch");
  double r2 = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double z = (theta[i] - mean[i]) / sigma;
    r2 += z * z;
  }
  return r2;
}

bool in_sampling_region(const GaussianLayerPosterior& post, double radius2) {
  return post.epsilon_quantile == 0.0 || radius2 > post.radius2_threshold;
}

WeightProposal propose_layer_weights(const GaussianLayerPosterior& post, Rng& rng) {
  WeightProposal p{post.mean, 0.0};
  for (double& v : p.weights.values()) v = gauss_sample(rng, v, post.sigma);
  p.radius2 = mahalanobis_radius2(p.weights, post.mean, post.sigma);
  return p;
}

std::size_t default_max_rejection_attempts(double epsilon_quantile) {
  const double needed = std::ceil(50.0 / (1.0 - epsilon_quantile) - 1e-9);
  return std::max<std::size_t>(100, static_cast<std::size_t>(needed));
}

WeightDraw sample_layer_weights(const GaussianLayerPosterior& post, Rng& rng, std::size_t max_attempts) {
  if (!(post.sigma > 0.0)) throw std::invalid_argument("posterior sigma must be positive");
  for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
    WeightProposal p = propose_layer_weights(post, rng);
    if (in_sampling_region(post, p.radius2)) return {std::move(p.weights), p.radius2, attempt};
  }
  throw SamplerExhaustedError("sampler for layer '" + post.layer_name + "' exhausted " +
                              std::to_string(max_attempts) + " attempts at q=" +
                              std::to_string(post.epsilon_quantile));
}

void EnsembleConfig::validate() const {
  if (sample_count == 0) throw std::invalid_argument("Monte-Carlo sample count must be positive");
  if (max_rejection_attempts && *max_rejection_attempts == 0) {
    throw std::invalid_argument("max_rejection_attempts must be positive");
  }
}

MonteCarloEnsemble::MonteCarloEnsemble(const Model& model, std::vector<GaussianLayerPosterior> posteriors,
                                       const EnsembleConfig& config, std::size_t threads)
    : model_(&model), posteriors_(std::move(posteriors)) {
  config.validate();
  for (const auto& post : posteriors_) {
    if (post.layer_index >= model.layers.size() || model.layers[post.layer_index].name != post.layer_name ||
        model.layers[post.layer_index].weights().shape() != post.mean.shape()) {
      throw std::invalid_argument("posterior for '" + post.layer_name + "' was not built from this model");
    }
  }
  members_.resize(config.sample_count);
  parallel_for(config.sample_count, threads, [&](std::size_t t) {
    std::vector<Tensor> weights;
    weights.reserve(posteriors_.size());
    for (const auto& post : posteriors_) {
      Rng rng = Rng::stream(config.seed, {t, post.layer_index});
      const std::size_t cap = config.max_rejection_attempts.value_or(
          default_max_rejection_attempts(post.epsilon_quantile));
      weights.push_back(sample_layer_weights(post, rng, cap).weights);
    }
    members_[t] = std::move(weights);
  });
}

std::vector<Prediction> MonteCarloEnsemble::predict(const Tensor& input, std::size_t threads) const {
  std::vector<Prediction> out(members_.size());
  parallel_for(members_.size(), threads, [&](std::size_t t) {
    std::vector<const Tensor*> overrides(model_->layers.size(), nullptr);
    for (std::size_t p = 0; p < posteriors_.size(); ++p) overrides[posteriors_[p].layer_index] = &members_[t][p];
    out[t] = forward(*model_, input, overrides);
  });
  return out;
}

std::vector<Prediction> mc_predict(const Model& model, const std::vector<GaussianLayerPosterior>& posteriors,
                                   const Tensor& input, const EnsembleConfig& config, std::size_t threads) {
  return MonteCarloEnsemble(model, posteriors, config, threads).predict(input, threads);
}

PredictiveSummary predictive_mean(const std::vector<Prediction>& samples) {
  if (samples.empty()) throw std::invalid_argument("predictive_mean: empty sample list");
  const std::size_t k = samples.front().logits.size();
  const double n = static_cast<double>(samples.size());
  PredictiveSummary s{Tensor({k}), std::nullopt, Tensor({k})};
  Tensor logit_mean({k});
  const bool with_box = samples.front().box.has_value();
  if (with_box) s.mean_box = Tensor({4});
  for (const auto& sample : samples) {
    if (sample.logits.size() != k || sample.box.has_value() != with_box) {
      throw ShapeError("predictive_mean: samples disagree in shape");
    }
    const Tensor p = softmax(sample.logits);
    for (std::size_t i = 0; i < k; ++i) {
      s.mean_probabilities[i] += p[i];
      logit_mean[i] += sample.logits[i];
    }
    if (with_box) {
      for (std::size_t j = 0; j < 4; ++j) (*s.mean_box)[j] += (*sample.box)[j];
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    s.mean_probabilities[i] /= n;
    logit_mean[i] /= n;
  }
  if (with_box) {
    for (double& v : s.mean_box->values()) v /= n;
  }
  if (samples.size() > 1) {
    for (const auto& sample : samples) {
      for (std::size_t i = 0; i < k; ++i) {
        const double d = sample.logits[i] - logit_mean[i];
        s.logit_variance[i] += d * d;
      }
    }
    for (double& v : s.logit_variance.values()) v /= n - 1.0;
  }
  return s;
}

}  // namespace bayeslayers
