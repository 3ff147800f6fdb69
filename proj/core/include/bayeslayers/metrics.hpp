#pragma once

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <optional>
#include <vector>

#include "bayeslayers/tensor.hpp"

namespace bayeslayers {

// Scores where higher means "more in-distribution". ID is the positive class.
struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
};

// gamma = calibrate_gamma(id_scores, tpr_target); returns the fraction of OOD
// scores >= gamma. Empirical thresholds only, no interpolation.
double fpr_at_tpr(const ScoreSet& scores, double tpr_target = 0.95);

// Mann-Whitney form: P(id > ood) + 0.5 P(id == ood), O(n log n).
double auroc(const ScoreSet& scores);

struct RocPoint {
  double threshold;
  double tpr;
  double fpr;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

// Starts at (threshold=+inf, 0, 0), then one point per distinct observed
// score in descending order with rates computed as "score >= threshold". The
// last point is (1, 1).
std::vector<RocPoint> roc_curve(const ScoreSet& scores);

double trapezoid_area(const std::vector<RocPoint>& curve);

// CSV with header "threshold,tpr,fpr", values as %.9g.
void write_roc_csv(std::ostream& out, const std::vector<RocPoint>& curve);

// Intersection over union of [x_min, y_min, x_max, y_max] boxes. Throws
// std::invalid_argument for a malformed box. 0 when the union is empty.
double iou(const Tensor& a, const Tensor& b);

struct IdPrediction {
  std::size_t predicted_class = 0;
  std::optional<Tensor> box;
};

struct IdTruth {
  std::size_t label = 0;
  std::optional<Tensor> box;
};

struct IdTaskMetrics {
  double accuracy = 0.0;
  // Correct class and IoU >= 0.5; absent when no truth carries a box.
  std::optional<double> detection_accuracy;
};

inline constexpr double kDetectionIouThreshold = 0.5;

IdTaskMetrics id_task_metrics(const std::vector<IdPrediction>& predictions, const std::vector<IdTruth>& truths);

}  // namespace bayeslayers
