#include "avsync/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "avsync/ctc.hpp"
#include "avsync/detector.hpp"
#include "avsync/error.hpp"

namespace avsync {

namespace {

constexpr double kAudioMin = -32768.0;
constexpr double kAudioMax = 32767.0;
constexpr double kPixelMin = 0.0;
constexpr double kPixelMax = 255.0;
constexpr std::size_t kPatience = 50;

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Keeps every element of `adv` within `eps` of `x` and within [lo, hi].
void project(Tensor& adv, const Tensor& x, double eps, double lo, double hi) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    // x +- eps can round outward; step back so |adv - x| <= eps holds as computed.
    double up = x[i] + eps, down = x[i] - eps;
    while (up - x[i] > eps) up = std::nextafter(up, -inf);
    while (x[i] - down > eps) down = std::nextafter(down, inf);
    adv[i] = std::clamp(adv[i], std::max(lo, down), std::min(hi, up));
  }
}

Tensor difference(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Media delta_of(const Media& adv, const Media& x) {
  return {difference(adv.audio, x.audio), difference(adv.video, x.video)};
}

std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i)
    if (t[i] > t[best]) best = i;
  return best;
}

Tensor word_logits(const WordModel& model, const Media& m) {
  Graph g;
  const auto p = model.params().bind(g, false);
  return g.value(model.logits(g, p, g.constant(m.audio), g.constant(m.video)));
}

Tensor seq_logprobs(const SeqModel& model, const Media& m) {
  Graph g;
  const auto p = model.params().bind(g, false);
  return g.value(model.logprobs(g, p, g.constant(m.audio), g.constant(m.video)));
}

void check_budget(double value, const char* name) {
  if (!(value >= 0.0) || !std::isfinite(value)) throw ConfigError(std::string(name) + " must be a finite value >= 0");
}

AdversarialExample finish_word(const WordModel& model, const AvClip& clip, WordLabel label, Media adv,
                               std::size_t iterations, bool degenerate) {
  AdversarialExample ex;
  ex.original = clip;
  ex.delta = delta_of(adv, to_media(clip));
  ex.adversarial = std::move(adv);
  ex.goal = UntargetedGoal{label.index};
  ex.predicted_class = argmax(word_logits(model, ex.adversarial));
  ex.success = *ex.predicted_class != label.index;
  ex.iterations = iterations;
  ex.degenerate = degenerate;
  ex.distortion = measure_distortion(clip, ex.adversarial);
  return ex;
}

// Signed-gradient iterations shared by FGSM (one step of size eps) and BIM.
AdversarialExample iterate_word(const WordModel& model, const AvClip& clip, WordLabel label, const AttackConfig& config,
                                double step_audio, double step_video, std::size_t iterations) {
  config.validate();
  model.check_clip(clip);
  if (label.index >= model.config().vocab) throw ConfigError("label outside model vocabulary");
  const Media x = to_media(clip);
  if (config.eps_audio == 0.0 && config.eps_video == 0.0) return finish_word(model, clip, label, x, 0, true);
  Media adv = x;
  for (std::size_t it = 0; it < iterations; ++it) {
    const Media g = word_loss_gradient(model, adv, label.index);
    for (std::size_t i = 0; i < adv.audio.size(); ++i) adv.audio[i] += step_audio * sgn(g.audio[i]);
    for (std::size_t i = 0; i < adv.video.size(); ++i) adv.video[i] += step_video * sgn(g.video[i]);
    project(adv.audio, x.audio, config.eps_audio, kAudioMin, kAudioMax);
    project(adv.video, x.video, config.eps_video, kPixelMin, kPixelMax);
  }
  return finish_word(model, clip, label, std::move(adv), iterations, false);
}

}  // namespace

std::string to_string(SuccessMode mode) { return mode == SuccessMode::full ? "full" : "partial"; }

SuccessMode parse_success_mode(const std::string& text) {
  if (text == "full") return SuccessMode::full;
  if (text == "partial") return SuccessMode::partial;
  throw ConfigError("unknown success mode '" + text + "' (expected full or partial)");
}

void AttackConfig::validate() const {
  check_budget(eps_audio, "eps_audio");
  check_budget(eps_video, "eps_video");
  check_budget(step_audio, "step_audio");
  check_budget(step_video, "step_video");
  check_budget(init_eps_audio, "init_eps_audio");
  check_budget(init_eps_video, "init_eps_video");
  if (!(anneal > 0.0 && anneal <= 1.0)) throw ConfigError("anneal factor must lie in (0, 1]");
  if (max_iterations == 0) throw ConfigError("max_iterations must be >= 1");
}

std::size_t AttackConfig::bim_iterations() const {
  return iterations > 0 ? iterations : bim_default_iterations(eps_video);
}

std::size_t bim_default_iterations(double eps_video) {
  const double n = std::round(std::min(eps_video + 4.0, 1.25 * eps_video));
  return n < 1.0 ? 1 : static_cast<std::size_t>(n);
}

Media to_media(const AvClip& clip) { return {audio_tensor(clip), video_tensor(clip)}; }

AvClip to_clip(const Media& media, const AvClip& like) {
  AvClip out = like;
  if (media.audio.size() != like.audio.size() || media.video.size() != like.video.size()) {
    throw ShapeError("media sizes do not match the reference clip");
  }
  for (std::size_t i = 0; i < out.audio.size(); ++i) {
    out.audio[i] = static_cast<std::int16_t>(std::clamp(std::round(media.audio[i]), kAudioMin, kAudioMax));
  }
  for (std::size_t i = 0; i < out.video.size(); ++i) {
    out.video[i] = static_cast<std::uint8_t>(std::clamp(std::round(media.video[i]), kPixelMin, kPixelMax));
  }
  return out;
}

Distortion measure_distortion(const AvClip& original, const Media& adversarial) {
  const Media x = to_media(original);
  Distortion d;
  d.l2_video = l2_distortion(adversarial.video.data(), x.video.data(), original.pixels_per_frame());
  d.linf_video = linf_distortion(adversarial.video.data(), x.video.data());
  d.linf_audio = linf_distortion(adversarial.audio.data(), x.audio.data());
  if (d.linf_audio > 0.0 && max_abs(x.audio) > 0.0) {
    const Tensor delta = difference(adversarial.audio, x.audio);
    d.linf_audio_db = db_distortion(delta.data(), x.audio.data());
  }
  return d;
}

Media word_loss_gradient(const WordModel& model, const Media& x, std::size_t label, double* loss) {
  Graph g;
  const auto p = model.params().bind(g, false);
  Var audio = g.input(x.audio);
  Var video = g.input(x.video);
  Var l = cross_entropy(g, model.logits(g, p, audio, video), label);
  if (loss) *loss = g.value(l).item();
  const Gradients grads = g.backward(l);
  return {grads[audio], grads[video]};
}

Media ctc_loss_gradient(const SeqModel& model, const Media& x, const TokenSequence& target, double* loss,
                        Tensor* logprobs) {
  Graph g;
  const auto p = model.params().bind(g, false);
  Var audio = g.input(x.audio);
  Var video = g.input(x.video);
  Var lp = model.logprobs(g, p, audio, video);
  if (logprobs) *logprobs = g.value(lp);
  Var l = ctc_loss(g, lp, target);
  if (loss) *loss = g.value(l).item();
  const Gradients grads = g.backward(l);
  return {grads[audio], grads[video]};
}

AdversarialExample fgsm(const WordModel& model, const AvClip& clip, WordLabel label, const AttackConfig& config) {
  return iterate_word(model, clip, label, config, config.eps_audio, config.eps_video, 1);
}

AdversarialExample bim(const WordModel& model, const AvClip& clip, WordLabel label, const AttackConfig& config) {
  return iterate_word(model, clip, label, config, config.step_audio, config.step_video, config.bim_iterations());
}

bool goal_met(const TargetedGoal& goal, const TokenSequence& transcription) {
  const double w = wer(goal.target, transcription);
  return goal.mode == SuccessMode::full ? w == 0.0 : w <= 0.5;
}

AdversarialExample targeted_opt_attack(const SeqModel& model, const AvClip& clip, const TokenSequence& target,
                                       const AttackConfig& config) {
  config.validate();
  model.check_clip(clip);
  if (target.empty()) throw InfeasibleTargetError("target phrase is empty");
  for (std::size_t tok : target) {
    if (tok >= model.config().vocab) throw ConfigError("target token " + std::to_string(tok) + " outside vocabulary");
  }
  if (ctc_min_frames(target) > clip.frames) {
    throw InfeasibleTargetError("target needs " + std::to_string(ctc_min_frames(target)) + " frames, clip has " +
                                std::to_string(clip.frames));
  }
  const TargetedGoal goal{target, config.mode};
  const Media x = to_media(clip);
  Media adv = x;
  double bound_a = config.init_eps_audio;
  double bound_v = config.init_eps_video;

  struct Snapshot {
    Media adv;
    TokenSequence transcription;
    double wer = 0.0;
    double size = 0.0;  // L-inf relative to the initial bounds
    std::size_t iteration = 0;
  };
  std::optional<Snapshot> best_success;
  std::optional<Snapshot> best_effort;
  auto relative_size = [&](double la, double lv) {
    return (config.init_eps_audio > 0.0 ? la / config.init_eps_audio : 0.0) +
           (config.init_eps_video > 0.0 ? lv / config.init_eps_video : 0.0);
  };

  // Step sizes halve when the loss stalls, down to an eighth.
  double step_a = config.step_audio, step_v = config.step_video;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stalled = 0;

  std::size_t steps = 0;
  while (true) {
    Tensor lp;
    double loss = 0.0;
    const Media g = ctc_loss_gradient(model, adv, target, &loss, &lp);
    if (loss < best_loss) {
      best_loss = loss;
      stalled = 0;
    } else if (++stalled >= kPatience) {
      step_a = std::max(step_a / 2, config.step_audio / 8);
      step_v = std::max(step_v / 2, config.step_video / 8);
      stalled = 0;
    }
    const TokenSequence hyp = ctc_greedy_decode(lp);
    const double w = wer(target, hyp);
    const double la = linf_distortion(adv.audio.data(), x.audio.data());
    const double lv = linf_distortion(adv.video.data(), x.video.data());
    if (!best_effort || w < best_effort->wer) best_effort = Snapshot{adv, hyp, w, relative_size(la, lv), steps};
    // Success only counts if it survives rounding to integer samples and pixels.
    std::optional<Snapshot> hit;
    if (goal_met(goal, hyp)) {
      const AvClip rounded = to_clip(adv, clip);
      const TokenSequence rh = model.transcribe(rounded);
      if (goal_met(goal, rh)) {
        const Media r = to_media(rounded);
        hit = Snapshot{r, rh, wer(target, rh),
                       relative_size(linf_distortion(r.audio.data(), x.audio.data()),
                                     linf_distortion(r.video.data(), x.video.data())),
                       steps};
      }
    }
    if (hit) {
      if (!best_success || hit->size <= best_success->size) best_success = std::move(hit);
      if (la == 0.0 && lv == 0.0) break;
      // Floored so integer steps keep the iterate on the integer grid.
      bound_a = std::floor(config.anneal * la);
      bound_v = std::floor(config.anneal * lv);
      project(adv.audio, x.audio, bound_a, kAudioMin, kAudioMax);
      project(adv.video, x.video, bound_v, kPixelMin, kPixelMax);
      best_loss = std::numeric_limits<double>::infinity();
      if (steps >= config.max_iterations) break;
      continue;
    }
    if (steps >= config.max_iterations) break;
    for (std::size_t i = 0; i < adv.audio.size(); ++i) adv.audio[i] -= step_a * sgn(g.audio[i]);
    for (std::size_t i = 0; i < adv.video.size(); ++i) adv.video[i] -= step_v * sgn(g.video[i]);
    project(adv.audio, x.audio, bound_a, kAudioMin, kAudioMax);
    project(adv.video, x.video, bound_v, kPixelMin, kPixelMax);
    ++steps;
  }

  const Snapshot& chosen = best_success ? *best_success : *best_effort;
  AdversarialExample ex;
  ex.original = clip;
  ex.adversarial = chosen.adv;
  ex.delta = delta_of(chosen.adv, x);
  ex.goal = goal;
  ex.success = best_success.has_value();
  ex.achieved_wer = chosen.wer;
  ex.transcription = chosen.transcription;
  ex.iterations = steps;
  ex.distortion = measure_distortion(clip, ex.adversarial);
  return ex;
}

AdversarialExample quantize(const WordModel& model, const AdversarialExample& example) {
  const auto* goal = std::get_if<UntargetedGoal>(&example.goal);
  if (!goal) throw ConfigError("word model cannot re-evaluate a targeted example");
  const Media rounded = to_media(example.adversarial_clip());
  AdversarialExample out =
      finish_word(model, example.original, WordLabel{goal->true_label}, rounded, example.iterations, example.degenerate);
  out.quantized = true;
  return out;
}

AdversarialExample quantize(const SeqModel& model, const AdversarialExample& example) {
  const auto* goal = std::get_if<TargetedGoal>(&example.goal);
  if (!goal) throw ConfigError("sequence model cannot re-evaluate an untargeted example");
  AdversarialExample out = example;
  out.adversarial = to_media(example.adversarial_clip());
  out.delta = delta_of(out.adversarial, to_media(example.original));
  out.transcription = ctc_greedy_decode(seq_logprobs(model, out.adversarial));
  out.achieved_wer = wer(goal->target, out.transcription);
  out.success = goal_met(*goal, out.transcription);
  out.distortion = measure_distortion(example.original, out.adversarial);
  out.quantized = true;
  return out;
}

}  // namespace avsync
