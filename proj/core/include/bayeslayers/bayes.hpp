#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bayeslayers/network.hpp"
#include "bayeslayers/rng.hpp"

namespace bayeslayers {

// Which layers become Bayesian. Backbone means index < Model::backbone_end.
enum class PolicyKind { none, conv_backbone, linear_backbone, conv_all, linear_all, full };

// Fixed order used by the layer ablation.
inline constexpr std::array<PolicyKind, 6> kAllPolicies = {
    PolicyKind::none,     PolicyKind::conv_backbone, PolicyKind::linear_backbone,
    PolicyKind::conv_all, PolicyKind::linear_all,    PolicyKind::full,
};

std::string_view to_string(PolicyKind kind);
PolicyKind parse_policy(std::string_view name);

struct SelectionPolicy {
  PolicyKind kind = PolicyKind::none;
  // When non-empty, replaces `kind` entirely.
  std::vector<std::string> explicit_layers;
};

// Names of the selected layers in model order. conv2d and linear layers are
// selectable by every policy that names them; batchnorm only under `full`.
// Throws std::invalid_argument for an unknown or parameterless explicit name.
std::vector<std::string> select_layers(const Model& model, const SelectionPolicy& policy);

inline constexpr double kDefaultAlpha = 0.05;
inline constexpr double kDefaultEpsilonQuantile = 0.05;
inline constexpr double kSigmaFloor = 1e-6;

// Isotropic Gaussian over one layer's weight tensor (params[0]), centred on
// the pretrained values.
struct GaussianLayerPosterior {
  std::string layer_name;
  std::size_t layer_index = 0;
  Tensor mean;
  double sigma = 0.0;
  std::size_t dimension = 0;
  // Draws are kept only outside the Mahalanobis ball holding this much
  // probability mass; 0 accepts everything.
  double epsilon_quantile = 0.0;
  // chi_square_quantile(dimension, epsilon_quantile), cached.
  double radius2_threshold = 0.0;
};

// sigma = alpha * max(RMS(weights), kSigmaFloor). The model is not modified.
std::vector<GaussianLayerPosterior> build_posteriors(const Model& model, const std::vector<std::string>& selection,
                                                     double alpha = kDefaultAlpha,
                                                     double epsilon_quantile = kDefaultEpsilonQuantile);

// sum_i ((theta_i - mu_i) / sigma)^2
double mahalanobis_radius2(const Tensor& theta, const Tensor& mean, double sigma);

// True iff a weight vector at this squared radius lies in the sampling region.
bool in_sampling_region(const GaussianLayerPosterior& post, double radius2);

struct WeightProposal {
  Tensor weights;
  double radius2 = 0.0;
};

// One unconstrained draw from N(mean, sigma^2 I).
WeightProposal propose_layer_weights(const GaussianLayerPosterior& post, Rng& rng);

// max(100, ceil(50 / (1 - q)))
std::size_t default_max_rejection_attempts(double epsilon_quantile);

struct WeightDraw {
  Tensor weights;
  double radius2 = 0.0;
  std::size_t attempts = 0;
};

// Rejection sampling until in_sampling_region holds. Throws
// SamplerExhaustedError after max_attempts proposals.
WeightDraw sample_layer_weights(const GaussianLayerPosterior& post, Rng& rng, std::size_t max_attempts);

struct EnsembleConfig {
  std::size_t sample_count = 30;
  std::uint64_t seed = 0;
  // Unset means default_max_rejection_attempts(q) per layer.
  std::optional<std::size_t> max_rejection_attempts;

  void validate() const;
};

// T sampled weight sets for the selected layers. Member t, layer l is drawn
// from Rng::stream(seed, {t, l}) with l the model layer index, so every
// member is independent of thread count and scheduling. Keeps a reference to
// the model, which must outlive the ensemble.
class MonteCarloEnsemble {
 public:
  MonteCarloEnsemble(const Model& model, std::vector<GaussianLayerPosterior> posteriors,
                     const EnsembleConfig& config, std::size_t threads = 1);

  std::size_t size() const { return members_.size(); }
  const std::vector<GaussianLayerPosterior>& posteriors() const { return posteriors_; }

  // Sampled weights of member t for posteriors()[p].
  const Tensor& member_weights(std::size_t t, std::size_t p) const { return members_.at(t).at(p); }

  // One prediction per member, in member order.
  std::vector<Prediction> predict(const Tensor& input, std::size_t threads = 1) const;

  const Model& model() const { return *model_; }

 private:
  const Model* model_;
  std::vector<GaussianLayerPosterior> posteriors_;
  std::vector<std::vector<Tensor>> members_;
};

// The full Monte-Carlo predictive sample for one input. Equivalent to
// MonteCarloEnsemble(model, posteriors, config, threads).predict(input).
std::vector<Prediction> mc_predict(const Model& model, const std::vector<GaussianLayerPosterior>& posteriors,
                                   const Tensor& input, const EnsembleConfig& config, std::size_t threads = 1);

struct PredictiveSummary {
  Tensor mean_probabilities;
  std::optional<Tensor> mean_box;
  // Unbiased per-logit variance across samples (zero for a single sample).
  Tensor logit_variance;
};

PredictiveSummary predictive_mean(const std::vector<Prediction>& samples);

}  // namespace bayeslayers
