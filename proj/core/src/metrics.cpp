#include "bayeslayers/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>

#include "bayeslayers/scoring.hpp"

namespace bayeslayers {

namespace {

void require_populations(const ScoreSet& s) {
  if (s.id_scores.empty() || s.ood_scores.empty()) {
    throw std::invalid_argument("both ID and OOD score populations must be non-empty");
  }
}

}  // namespace

double fpr_at_tpr(const ScoreSet& scores, double tpr_target) {
  require_populations(scores);
  const double gamma = calibrate_gamma(scores.id_scores, tpr_target);
  const auto false_positives = std::count_if(scores.ood_scores.begin(), scores.ood_scores.end(),
                                             [gamma](double s) { return s >= gamma; });
  return static_cast<double>(false_positives) / static_cast<double>(scores.ood_scores.size());
}

double auroc(const ScoreSet& scores) {
  require_populations(scores);
  struct Item {
    double score;
    bool is_id;
  };
  std::vector<Item> items;
  items.reserve(scores.id_scores.size() + scores.ood_scores.size());
  for (double s : scores.id_scores) items.push_back({s, true});
  for (double s : scores.ood_scores) items.push_back({s, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Doubled mid-ranks keep everything in integers: a tie block occupying
  // 1-based ranks i+1..j has doubled mid-rank i + j + 1.
  std::int64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const auto doubled = static_cast<std::int64_t>(i + j + 1);
    for (std::size_t k = i; k < j; ++k) {
      if (items[k].is_id) rank_sum_x2 += doubled;
    }
    i = j;
  }
  const auto n_id = static_cast<std::int64_t>(scores.id_scores.size());
  const auto n_ood = static_cast<std::int64_t>(scores.ood_scores.size());
  // 2U = 2 R_id - n_id (n_id + 1); AUROC = U / (n_id n_ood).
  const std::int64_t u_x2 = rank_sum_x2 - n_id * (n_id + 1);
  return static_cast<double>(u_x2) / static_cast<double>(2 * n_id * n_ood);
}

std::vector<RocPoint> roc_curve(const ScoreSet& scores) {
  require_populations(scores);
  std::vector<double> id = scores.id_scores, ood = scores.ood_scores;
  std::sort(id.begin(), id.end(), std::greater<>());
  std::sort(ood.begin(), ood.end(), std::greater<>());
  std::vector<double> thresholds(id);
  thresholds.insert(thresholds.end(), ood.begin(), ood.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double n_id = static_cast<double>(id.size()), n_ood = static_cast<double>(ood.size());
  std::vector<RocPoint> curve;
  curve.reserve(thresholds.size() + 1);
  curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (double t : thresholds) {
    while (tp < id.size() && id[tp] >= t) ++tp;
    while (fp < ood.size() && ood[fp] >= t) ++fp;
    curve.push_back({t, static_cast<double>(tp) / n_id, static_cast<double>(fp) / n_ood});
  }
  return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
  }
  return area;
}

void write_roc_csv(std::ostream& out, const std::vector<RocPoint>& curve) {
  out << "threshold,tpr,fpr\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", p.threshold, p.tpr, p.fpr);
    out << buf;
  }
}

namespace {

void require_box(const Tensor& b) {
  if (b.size() != 4) throw std::invalid_argument("box must have 4 coordinates");
  if (!b.all_finite() || b[0] > b[2] || b[1] > b[3]) {
    throw std::invalid_argument("malformed box: need x_min <= x_max and y_min <= y_max");
  }
}

}  // namespace

double iou(const Tensor& a, const Tensor& b) {
  require_box(a);
  require_box(b);
  const double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = ix * iy;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

IdTaskMetrics id_task_metrics(const std::vector<IdPrediction>& predictions, const std::vector<IdTruth>& truths) {
  if (predictions.size() != truths.size()) {
    throw std::invalid_argument("id_task_metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(truths.size()) + " truths");
  }
  if (predictions.empty()) throw std::invalid_argument("id_task_metrics: empty input");
  std::size_t correct = 0, detected = 0, with_box = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool class_ok = predictions[i].predicted_class == truths[i].label;
    if (class_ok) ++correct;
    if (truths[i].box) {
      ++with_box;
      if (class_ok && predictions[i].box) {
        // A degenerate predicted box (min > max) counts as a miss.
        const Tensor& p = *predictions[i].box;
        const bool well_formed = p.size() == 4 && p[0] <= p[2] && p[1] <= p[3];
        if (well_formed && iou(p, *truths[i].box) >= kDetectionIouThreshold) ++detected;
      }
    }
  }
  const double n = static_cast<double>(predictions.size());
  IdTaskMetrics m;
  m.accuracy = static_cast<double>(correct) / n;
  if (with_box > 0) m.detection_accuracy = static_cast<double>(detected) / static_cast<double>(with_box);
  return m;
}

}  // namespace bayeslayers
