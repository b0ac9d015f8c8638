#include <cmath>
#include <random>

#include <doctest.h>

#include "avsync/attacks.hpp"
#include "avsync/ctc.hpp"
#include "avsync/error.hpp"
#include "fixtures.hpp"

using namespace avsync;

namespace {

double max_dev(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_dev(const std::vector<std::int16_t>& a, const std::vector<std::int16_t>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

double max_dev(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

WordLabel label_of(const LabeledClip& c) { return std::get<WordLabel>(c.label); }

}  // namespace

TEST_CASE("bim iteration counts follow min(eps + 4, 1.25 eps)") {
  CHECK(bim_default_iterations(16) == 20);
  CHECK(bim_default_iterations(32) == 36);
  CHECK(bim_default_iterations(4) == 5);
  CHECK(bim_default_iterations(8) == 10);
  CHECK(bim_default_iterations(0) == 1);
  AttackConfig c;
  CHECK(c.bim_iterations() == 20);
  c.iterations = 7;
  CHECK(c.bim_iterations() == 7);
}

TEST_CASE("attack config validation") {
  AttackConfig c;
  c.eps_audio = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.anneal = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.max_iterations = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_success_mode("partial") == SuccessMode::partial);
  CHECK_THROWS_AS(parse_success_mode("half"), ConfigError);
}

TEST_CASE("zero budgets leave the clip untouched") {
  const auto& w = fixtures::word();
  AttackConfig c;
  c.eps_audio = 0;
  c.eps_video = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& clip = w.test[i];
    for (const auto& ex : {fgsm(w.model, clip.clip, label_of(clip), c), bim(w.model, clip.clip, label_of(clip), c)}) {
      CHECK(ex.degenerate);
      CHECK(ex.adversarial_clip() == clip.clip);
      CHECK(ex.success == (w.model.predict(clip.clip) != label_of(clip).index));
    }
  }
}

TEST_CASE("fgsm steps along the sign of the loss gradient") {
  const auto& w = fixtures::word();
  const AttackConfig c;
  const auto& clip = w.test[0];
  const Media x = to_media(clip.clip);
  const Media g = word_loss_gradient(w.model, x, label_of(clip).index);
  const AdversarialExample ex = fgsm(w.model, clip.clip, label_of(clip), c);
  auto sgn = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  std::size_t checked = 0;
  for (std::size_t i = 0; i < x.video.size(); ++i) {
    const double want = x.video[i] + c.eps_video * sgn(g.video[i]);
    if (want < 0 || want > 255) continue;
    CHECK(ex.adversarial.video[i] == want);
    ++checked;
  }
  for (std::size_t i = 0; i < x.audio.size(); ++i) {
    const double want = x.audio[i] + c.eps_audio * sgn(g.audio[i]);
    if (want < -32768 || want > 32767) continue;
    CHECK(ex.adversarial.audio[i] == want);
    ++checked;
  }
  CHECK(checked > x.video.size());
}

TEST_CASE("one bim step of size eps is fgsm") {
  const auto& w = fixtures::word();
  AttackConfig c;
  c.iterations = 1;
  c.step_audio = c.eps_audio;
  c.step_video = c.eps_video;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& clip = w.test[i];
    const auto a = fgsm(w.model, clip.clip, label_of(clip), c);
    const auto b = bim(w.model, clip.clip, label_of(clip), c);
    CHECK(a.adversarial.audio == b.adversarial.audio);
    CHECK(a.adversarial.video == b.adversarial.video);
    CHECK(a.success == b.success);
  }
}

TEST_CASE("bim stays inside the eps-ball before and after quantization") {
  const auto& w = fixtures::word();
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ea(0.0, 3000.0), ev(0.0, 40.0), sa(1.0, 500.0), sv(0.25, 6.0);
  std::uniform_int_distribution<std::size_t> pick(0, w.test.size() - 1), iters(1, 4);
  std::size_t violations = 0;
  for (int run = 0; run < 40; ++run) {
    AttackConfig c;
    c.eps_audio = ea(rng);
    c.eps_video = ev(rng);
    c.step_audio = sa(rng);
    c.step_video = sv(rng);
    c.iterations = iters(rng);
    const auto& clip = w.test[pick(rng)];
    const auto ex = bim(w.model, clip.clip, label_of(clip), c);
    const Media x = to_media(clip.clip);
    if (max_dev(ex.adversarial.audio, x.audio) > c.eps_audio) ++violations;
    if (max_dev(ex.adversarial.video, x.video) > c.eps_video) ++violations;
    const AvClip q = quantize(w.model, ex).adversarial_clip();
    if (max_dev(q.audio, clip.clip.audio) > c.eps_audio + 0.5) ++violations;
    if (max_dev(q.video, clip.clip.video) > c.eps_video + 0.5) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("quantize is a fixed point on integral media and rounds by at most one half") {
  const auto& w = fixtures::word();
  const auto& clip = w.test[1];
  const auto ex = bim(w.model, clip.clip, label_of(clip), AttackConfig{});
  const auto q = quantize(w.model, ex);
  CHECK(q.quantized);
  CHECK(q.adversarial.audio == ex.adversarial.audio);
  CHECK(q.adversarial.video == ex.adversarial.video);

  AttackConfig c;
  c.step_audio = 37.3;
  c.step_video = 0.7;
  const auto frac = bim(w.model, clip.clip, label_of(clip), c);
  const auto qf = quantize(w.model, frac);
  CHECK(max_dev(qf.adversarial.audio, frac.adversarial.audio) <= 0.5);
  CHECK(max_dev(qf.adversarial.video, frac.adversarial.video) <= 0.5);
  for (double v : qf.adversarial.video.data()) CHECK(v == std::round(v));
  CHECK(qf.success == (w.model.predict(qf.adversarial_clip()) != label_of(clip).index));
}

TEST_CASE("attacks are deterministic") {
  const auto& w = fixtures::word();
  const auto& clip = w.test[2];
  const auto a = bim(w.model, clip.clip, label_of(clip), AttackConfig{});
  const auto b = bim(w.model, clip.clip, label_of(clip), AttackConfig{});
  CHECK(a.adversarial.audio == b.adversarial.audio);
  CHECK(a.adversarial.video == b.adversarial.video);
}

TEST_CASE("larger budgets never lower the bim success count") {
  const auto& w = fixtures::word();
  std::size_t prev = 0;
  for (double eps_v : {4.0, 8.0, 16.0, 32.0}) {
    AttackConfig c;
    c.eps_video = eps_v;
    c.eps_audio = 64.0 * eps_v;
    c.iterations = 10;
    c.step_video = 1.0;
    c.step_audio = 64.0;
    std::size_t ok = 0;
    for (const auto& clip : w.test) ok += bim(w.model, clip.clip, label_of(clip), c).success ? 1 : 0;
    CAPTURE(eps_v);
    CHECK(ok >= prev);
    prev = ok;
  }
}

TEST_CASE("fgsm and bim cut word accuracy at the default budget") {
  const auto& w = fixtures::word();
  const AttackConfig c;
  std::size_t clean = 0, after_fgsm = 0, after_bim = 0;
  for (const auto& clip : w.test) {
    clean += w.model.predict(clip.clip) == label_of(clip).index ? 1 : 0;
    after_fgsm += fgsm(w.model, clip.clip, label_of(clip), c).success ? 0 : 1;
    after_bim += bim(w.model, clip.clip, label_of(clip), c).success ? 0 : 1;
  }
  const double n = static_cast<double>(w.test.size());
  CHECK(clean / n - after_fgsm / n >= 0.5);
  CHECK(after_bim <= after_fgsm);
}

TEST_CASE("targeted attack on an already-satisfied target stops at once") {
  const auto& s = fixtures::seq();
  const auto& clip = s.test[0];
  const TokenSequence current = s.model.transcribe(clip.clip);
  REQUIRE_FALSE(current.empty());
  const auto ex = targeted_opt_attack(s.model, clip.clip, current, AttackConfig{});
  CHECK(ex.success);
  CHECK(ex.iterations == 0);
  CHECK(max_abs(ex.delta.audio) == 0.0);
  CHECK(max_abs(ex.delta.video) == 0.0);
  CHECK(*ex.achieved_wer == 0.0);
}

TEST_CASE("targeted attack rejects infeasible targets") {
  const auto& s = fixtures::seq();
  const auto& clip = s.test[0].clip;
  CHECK_THROWS_AS(targeted_opt_attack(s.model, clip, {}, AttackConfig{}), InfeasibleTargetError);
  const TokenSequence too_long(clip.frames + 1, 3);
  CHECK_THROWS_AS(targeted_opt_attack(s.model, clip, too_long, AttackConfig{}), InfeasibleTargetError);
  CHECK_THROWS_AS(targeted_opt_attack(s.model, clip, {1, 99}, AttackConfig{}), ConfigError);
}

TEST_CASE("targeted attack keeps the bound and reports a failed budget honestly") {
  const auto& s = fixtures::seq();
  const auto& clip = s.test[1];
  AttackConfig c;
  c.max_iterations = 3;
  const TokenSequence target{1, 2, 3, 4, 5, 6};
  const auto ex = targeted_opt_attack(s.model, clip.clip, target, c);
  CHECK(ex.iterations <= 3);
  CHECK(max_abs(ex.delta.audio) <= c.init_eps_audio);
  CHECK(max_abs(ex.delta.video) <= c.init_eps_video);
  if (!ex.success) CHECK(*ex.achieved_wer > 0.0);
  CHECK(ex.transcription == s.model.transcribe(to_clip(ex.adversarial, clip.clip)));

  const auto again = targeted_opt_attack(s.model, clip.clip, target, c);
  CHECK(again.adversarial.audio == ex.adversarial.audio);
  CHECK(again.adversarial.video == ex.adversarial.video);
}

TEST_CASE("success modes") {
  const TokenSequence t{1, 2, 3, 4, 5, 6};
  CHECK(goal_met({t, SuccessMode::full}, t));
  CHECK_FALSE(goal_met({t, SuccessMode::full}, {1, 2, 3, 4, 5, 7}));
  CHECK(goal_met({t, SuccessMode::partial}, {1, 2, 3, 9, 9, 9}));
  CHECK_FALSE(goal_met({t, SuccessMode::partial}, {1, 2, 9, 9, 9, 9}));
}

TEST_CASE("media conversion clamps to legal ranges") {
  const AvClip c = generate_clip(1, WordLabel{0}, GenConfig{});
  Media m = to_media(c);
  m.audio[0] = 1e6;
  m.audio[1] = -1e6;
  m.video[0] = -3.2;
  m.video[1] = 300.0;
  const AvClip back = to_clip(m, c);
  CHECK(back.audio[0] == 32767);
  CHECK(back.audio[1] == -32768);
  CHECK(back.video[0] == 0);
  CHECK(back.video[1] == 255);
}
