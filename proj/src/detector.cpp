#include "avsync/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "avsync/error.hpp"

namespace avsync {

double l2_distortion(std::span<const double> a, std::span<const double> b, std::size_t frame_size) {
  if (a.size() != b.size()) {
    throw ShapeError("l2: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
  }
  if (frame_size == 0 || a.size() % frame_size != 0) {
    throw ShapeError("l2: length " + std::to_string(a.size()) + " is not a whole number of " +
                     std::to_string(frame_size) + "-pixel frames");
  }
  const std::size_t frames = a.size() / frame_size;
  if (frames == 0) return 0.0;
  double total = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    double sq = 0.0;
    for (std::size_t i = f * frame_size; i < (f + 1) * frame_size; ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
    total += std::sqrt(sq / static_cast<double>(frame_size));
  }
  return total / static_cast<double>(frames);
}

double linf_distortion(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("linf: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double db(std::span<const double> samples) {
  double peak = 0.0;
  for (double v : samples) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) throw DomainError("dB of an all-zero signal is undefined");
  return 20.0 * std::log10(peak);
}

double db_distortion(std::span<const double> delta, std::span<const double> x) { return db(delta) - db(x); }

namespace {

void split_scores(std::span<const ScoredClip> scores, std::vector<double>& benign, std::vector<double>& adv) {
  for (const auto& s : scores) (s.adversarial ? adv : benign).push_back(s.score);
}

}  // namespace

double auc(std::span<const double> benign, std::span<const double> adversarial) {
  if (benign.empty() || adversarial.empty()) throw DomainError("AUC needs at least one score in each class");
  // Rank-sum form of pair counting.
  std::vector<double> adv(adversarial.begin(), adversarial.end());
  std::sort(adv.begin(), adv.end());
  double wins = 0.0;
  for (double b : benign) {
    const auto lo = std::lower_bound(adv.begin(), adv.end(), b);
    const auto hi = std::upper_bound(adv.begin(), adv.end(), b);
    wins += static_cast<double>(lo - adv.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(benign.size()) * static_cast<double>(adv.size()));
}

double auc(std::span<const ScoredClip> scores) {
  std::vector<double> benign, adv;
  split_scores(scores, benign, adv);
  return auc(benign, adv);
}

std::vector<RocPoint> roc_curve(std::span<const ScoredClip> scores) {
  std::vector<double> benign, adv;
  split_scores(scores, benign, adv);
  if (benign.empty() || adv.empty()) throw DomainError("ROC needs at least one score in each class");
  std::vector<ScoredClip> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), [](const ScoredClip& a, const ScoredClip& b) { return a.score < b.score; });
  const double np = static_cast<double>(adv.size());
  const double nn = static_cast<double>(benign.size());
  std::vector<RocPoint> curve;
  curve.push_back({0.0, 0.0, sorted.front().score});
  std::size_t tp = 0, fp = 0;
  // Raising the threshold past each distinct score flags every clip at it.
  for (std::size_t i = 0; i < sorted.size();) {
    const double s = sorted[i].score;
    while (i < sorted.size() && sorted[i].score == s) {
      (sorted[i].adversarial ? tp : fp) += 1;
      ++i;
    }
    const double next = i < sorted.size() ? sorted[i].score : s + 1.0;
    curve.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / np, 0.5 * (s + next)});
  }
  return curve;
}

double trapezoid_area(std::span<const RocPoint> curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * 0.5 * (curve[i].tpr + curve[i - 1].tpr);
  }
  return area;
}

Confusion confusion_at(std::span<const ScoredClip> scores, double threshold) {
  Confusion c;
  for (const auto& s : scores) {
    const bool flagged = s.score < threshold;
    if (s.adversarial) {
      (flagged ? c.true_adv : c.false_benign) += 1;
    } else {
      (flagged ? c.false_adv : c.true_benign) += 1;
    }
  }
  return c;
}

namespace {

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

double f1_adversarial(const Confusion& c) { return f1(c.true_adv, c.false_adv, c.false_benign); }
double f1_benign(const Confusion& c) { return f1(c.true_benign, c.false_benign, c.false_adv); }
double f1_average(const Confusion& c) { return 0.5 * (f1_adversarial(c) + f1_benign(c)); }

std::vector<double> candidate_thresholds(std::span<const ScoredClip> scores) {
  std::vector<double> values;
  for (const auto& s : scores) values.push_back(s.score);
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  std::vector<double> out;
  if (values.empty()) return out;
  out.push_back(values.front() - 1.0);
  for (std::size_t i = 1; i < values.size(); ++i) out.push_back(0.5 * (values[i - 1] + values[i]));
  out.push_back(values.back() + 1.0);
  return out;
}

ThresholdChoice select_threshold(std::span<const ScoredClip> validation) {
  std::vector<double> benign, adv;
  split_scores(validation, benign, adv);
  if (benign.empty() || adv.empty()) throw DomainError("threshold selection needs both classes in validation");
  ThresholdChoice best{0.0, -1.0};
  for (double t : candidate_thresholds(validation)) {
    const double f = f1_average(confusion_at(validation, t));
    if (f > best.f1_avg) best = {t, f};
  }
  return best;
}

DetectionReport evaluate(std::span<const ScoredClip> test, double threshold) {
  if (test.empty()) throw DomainError("cannot evaluate an empty test set");
  DetectionReport r;
  r.threshold = threshold;
  r.counts = confusion_at(test, threshold);
  r.f1_adv = f1_adversarial(r.counts);
  r.f1_benign = f1_benign(r.counts);
  r.f1_avg = 0.5 * (r.f1_adv + r.f1_benign);
  for (const auto& s : test) (s.adversarial ? r.n_adv : r.n_benign) += 1;
  r.auc = (r.n_adv > 0 && r.n_benign > 0) ? auc(test) : 0.5;
  return r;
}

}  // namespace avsync
