#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "bayeslayers/network.hpp"

namespace bayeslayers {

enum class Aggregation {
  mean_score,             // mean over members of S(E(logits_t))
  score_of_mean_logits,   // S(E(mean_t logits_t))
};

std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view name);

struct ScoringConfig {
  double temperature = 1.0;
  double phi = 1.0;
  Aggregation aggregation = Aggregation::mean_score;

  void validate() const;
};

// E = -T * log sum_k exp(f_k)
double energy(const Tensor& logits, double temperature = 1.0);

// S = exp(-phi E) / (1 + exp(-phi E)), evaluated without overflow. Saturates
// to the nearest representable value strictly inside (0, 1), so very large
// |E| yields the smallest positive double or the largest double below one.
double uncertainty_score(double energy_value, double phi = 1.0);

struct OodScoreRecord {
  std::size_t sample_id = 0;
  double energy_mean = 0.0;
  double score = 0.5;
  // Population standard deviation of the per-member scores.
  double score_std = 0.0;
  bool is_id_truth = true;
  std::size_t predicted_class = 0;
  std::optional<Tensor> predicted_box;
};

// Combines a Monte-Carlo ensemble into one record. The predicted class is the
// argmax of the mean softmax; the box is the mean box. sample_id and
// is_id_truth are left for the caller to fill.
OodScoreRecord score_ensemble(const std::vector<Prediction>& samples, const ScoringConfig& config);

// Largest observed score gamma such that at least ceil(tpr_target * n) of the
// scores are >= gamma.
double calibrate_gamma(std::span<const double> id_scores, double tpr_target = 0.95);

// Number of scores that must be retained for a TPR target over n scores.
std::size_t retained_count(std::size_t n, double tpr_target);

enum class OodDecision { in_distribution, out_of_distribution };

// In-distribution iff score >= gamma.
OodDecision classify(double score, double gamma);

// -(1/N) sum log max(p_n[y_n], 1e-300)
double nll(const std::vector<std::pair<Tensor, std::size_t>>& predictions);

}  // namespace bayeslayers
