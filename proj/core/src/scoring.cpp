#include "bayeslayers/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "bayeslayers/ops.hpp"

namespace bayeslayers {

std::string_view to_string(Aggregation a) {
  return a == Aggregation::mean_score ? "mean_score" : "score_of_mean_logits";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "mean_score") return Aggregation::mean_score;
  if (name == "score_of_mean_logits") return Aggregation::score_of_mean_logits;
  throw std::invalid_argument("unknown aggregation '" + std::string(name) + "'");
}

void ScoringConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw std::invalid_argument("temperature must be positive");
  if (!(phi > 0.0) || !std::isfinite(phi)) throw std::invalid_argument("phi must be positive");
}

double energy(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  return -temperature * log_sum_exp(logits);
}

double uncertainty_score(double energy_value, double phi) {
  if (!(phi > 0.0)) throw std::invalid_argument("phi must be positive");
  const double z = -phi * energy_value;
  double s;
  if (z >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    s = e / (1.0 + e);
  }
  constexpr double lowest = std::numeric_limits<double>::denorm_min();
  const double highest = std::nextafter(1.0, 0.0);
  return std::clamp(s, lowest, highest);
}

namespace {

struct Welford {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double population_std() const { return n == 0 ? 0.0 : std::sqrt(m2 / static_cast<double>(n)); }
};

}  // namespace

OodScoreRecord score_ensemble(const std::vector<Prediction>& samples, const ScoringConfig& config) {
  if (samples.empty()) throw std::invalid_argument("score_ensemble: empty ensemble");
  config.validate();
  const std::size_t k = samples.front().logits.size();

  Welford energies, scores;
  Tensor logit_mean({k});
  Tensor prob_mean({k});
  const bool with_box = samples.front().box.has_value();
  std::optional<Tensor> box_mean;
  if (with_box) box_mean = Tensor({4});
  std::size_t t = 0;
  for (const auto& s : samples) {
    ++t;
    const double e = energy(s.logits, config.temperature);
    energies.add(e);
    scores.add(uncertainty_score(e, config.phi));
    const Tensor p = softmax(s.logits);
    for (std::size_t i = 0; i < k; ++i) {
      logit_mean[i] += (s.logits[i] - logit_mean[i]) / static_cast<double>(t);
      prob_mean[i] += (p[i] - prob_mean[i]) / static_cast<double>(t);
    }
    if (with_box) {
      for (std::size_t j = 0; j < 4; ++j) (*box_mean)[j] += ((*s.box)[j] - (*box_mean)[j]) / static_cast<double>(t);
    }
  }

  OodScoreRecord r;
  r.energy_mean = energies.mean;
  r.score_std = scores.population_std();
  r.score = config.aggregation == Aggregation::mean_score
                ? scores.mean
                : uncertainty_score(energy(logit_mean, config.temperature), config.phi);
  r.predicted_class = static_cast<std::size_t>(
      std::max_element(prob_mean.values().begin(), prob_mean.values().end()) - prob_mean.values().begin());
  r.predicted_box = std::move(box_mean);
  return r;
}

std::size_t retained_count(std::size_t n, double tpr_target) {
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) throw std::invalid_argument("tpr_target must lie in (0, 1]");
  // The slack absorbs representation error such as 0.95 * 20 = 19.000000000000004.
  const double exact = tpr_target * static_cast<double>(n);
  const auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  return std::clamp<std::size_t>(count, 1, n);
}

double calibrate_gamma(std::span<const double> id_scores, double tpr_target) {
  if (id_scores.empty()) throw std::invalid_argument("calibrate_gamma: empty score list");
  const std::size_t keep = retained_count(id_scores.size(), tpr_target);
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  // keep-th largest value
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep - 1), sorted.end(),
                   std::greater<>());
  return sorted[keep - 1];
}

OodDecision classify(double score, double gamma) {
  return score >= gamma ? OodDecision::in_distribution : OodDecision::out_of_distribution;
}

double nll(const std::vector<std::pair<Tensor, std::size_t>>& predictions) {
  if (predictions.empty()) throw std::invalid_argument("nll: empty prediction list");
  double total = 0.0;
  for (const auto& [probs, label] : predictions) {
    if (label >= probs.size()) throw std::out_of_range("nll: label out of range");
    total -= std::log(std::max(probs[label], 1e-300));
  }
  return total / static_cast<double>(predictions.size());
}

}  // namespace bayeslayers
