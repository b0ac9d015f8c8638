#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace avsync {

// ---- distortion metrics -------------------------------------------------

// Per-frame RMS of the per-pixel difference, averaged over frames. Inputs are
// flat frame sequences of `frame_size` pixels each.
double l2_distortion(std::span<const double> a, std::span<const double> b, std::size_t frame_size);
double linf_distortion(std::span<const double> a, std::span<const double> b);

// 20 * log10(max_i |x_i|). Throws DomainError for an all-zero signal.
double db(std::span<const double> samples);
// Loudness of the perturbation relative to the clip: db(delta) - db(x).
double db_distortion(std::span<const double> delta, std::span<const double> x);

// ---- detection statistics -----------------------------------------------

// Positive class is "adversarial"; a clip is flagged when its sync
// confidence is strictly below the threshold.
struct ScoredClip {
  double score = 0.0;
  bool adversarial = false;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

// One point per distinct score threshold, from (0,0) to (1,1).
std::vector<RocPoint> roc_curve(std::span<const ScoredClip> scores);
double trapezoid_area(std::span<const RocPoint> curve);

// P(benign score > adversarial score), ties counted one half.
double auc(std::span<const double> benign, std::span<const double> adversarial);
double auc(std::span<const ScoredClip> scores);

struct Confusion {
  std::size_t true_adv = 0;     // adversarial flagged
  std::size_t false_adv = 0;    // benign flagged
  std::size_t true_benign = 0;  // benign passed
  std::size_t false_benign = 0; // adversarial passed
};

Confusion confusion_at(std::span<const ScoredClip> scores, double threshold);
double f1_adversarial(const Confusion& c);
double f1_benign(const Confusion& c);
double f1_average(const Confusion& c);

// Midpoints between consecutive distinct scores, plus one threshold below
// the minimum and one above the maximum.
std::vector<double> candidate_thresholds(std::span<const ScoredClip> scores);

struct ThresholdChoice {
  double threshold = 0.0;
  double f1_avg = 0.0;
};

// Scans candidate_thresholds and keeps the best mean F1; ties go to the
// smaller threshold. Needs both classes present.
ThresholdChoice select_threshold(std::span<const ScoredClip> validation);

struct DetectionReport {
  double auc = 0.0;
  double threshold = 0.0;
  double f1_benign = 0.0;
  double f1_adv = 0.0;
  double f1_avg = 0.0;
  Confusion counts;
  std::size_t n_benign = 0;
  std::size_t n_adv = 0;
};

DetectionReport evaluate(std::span<const ScoredClip> test, double threshold);

}  // namespace avsync
