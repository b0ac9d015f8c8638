#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>

#include "avsync/avdata.hpp"
#include "avsync/models.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

enum class SuccessMode { full, partial };  // WER == 0, WER <= 0.5
std::string to_string(SuccessMode mode);
SuccessMode parse_success_mode(const std::string& text);

// Perturbation budgets in raw media units (i16 samples, u8 pixels).
struct AttackConfig {
  double eps_audio = 1024.0;
  double eps_video = 16.0;
  double step_audio = 64.0;
  double step_video = 1.0;
  // BIM iterations; 0 selects bim_default_iterations(eps_video).
  std::size_t iterations = 0;

  // Targeted attack: starting bounds, shrink factor applied on each success,
  // and the iteration budget.
  double init_eps_audio = 2048.0;
  double init_eps_video = 32.0;
  double anneal = 0.9;
  std::size_t max_iterations = 1000;
  SuccessMode mode = SuccessMode::full;

  void validate() const;
  std::size_t bim_iterations() const;
};

// round(min(eps_v + 4, 1.25 eps_v)), at least 1.
std::size_t bim_default_iterations(double eps_video);

// Real-valued media in raw units: audio [T, samples_per_frame], video [T, H*W].
struct Media {
  Tensor audio;
  Tensor video;
};

Media to_media(const AvClip& clip);
// Rounds and clamps to the legal i16 / u8 ranges.
AvClip to_clip(const Media& media, const AvClip& like);

struct Distortion {
  double l2_video = 0.0;
  double linf_video = 0.0;
  double linf_audio = 0.0;
  std::optional<double> linf_audio_db;  // unset when the audio is untouched
};

Distortion measure_distortion(const AvClip& original, const Media& adversarial);

struct UntargetedGoal {
  std::size_t true_label = 0;
};
struct TargetedGoal {
  TokenSequence target;
  SuccessMode mode = SuccessMode::full;
};
using AttackGoal = std::variant<UntargetedGoal, TargetedGoal>;

struct AdversarialExample {
  AvClip original;
  Media adversarial;
  Media delta;
  AttackGoal goal;
  bool success = false;
  std::optional<std::size_t> predicted_class;  // word-level
  std::optional<double> achieved_wer;          // sentence-level
  TokenSequence transcription;                 // sentence-level
  std::size_t iterations = 0;                  // gradient steps taken
  bool degenerate = false;                     // both budgets were zero
  bool quantized = false;
  Distortion distortion;

  AvClip adversarial_clip() const { return to_clip(adversarial, original); }
};

AdversarialExample fgsm(const WordModel& model, const AvClip& clip, WordLabel label, const AttackConfig& config);
AdversarialExample bim(const WordModel& model, const AvClip& clip, WordLabel label, const AttackConfig& config);
AdversarialExample targeted_opt_attack(const SeqModel& model, const AvClip& clip, const TokenSequence& target,
                                       const AttackConfig& config);

bool goal_met(const TargetedGoal& goal, const TokenSequence& transcription);

// Rounds the adversarial media to integers and re-evaluates success and
// distortion on the rounded clip.
AdversarialExample quantize(const WordModel& model, const AdversarialExample& example);
AdversarialExample quantize(const SeqModel& model, const AdversarialExample& example);

// Gradients of the attack objective with respect to raw-unit media.
Media word_loss_gradient(const WordModel& model, const Media& x, std::size_t label, double* loss = nullptr);
Media ctc_loss_gradient(const SeqModel& model, const Media& x, const TokenSequence& target, double* loss = nullptr,
                        Tensor* logprobs = nullptr);

}  // namespace avsync
