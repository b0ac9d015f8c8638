#include <cmath>
#include <random>

#include <doctest.h>

#include "avsync/ctc.hpp"
#include "avsync/error.hpp"
#include "oracles.hpp"

using namespace avsync;

namespace {

Tensor uniform_logprobs(std::size_t t_len, std::size_t c) {
  return Tensor(Shape{t_len, c}, -std::log(static_cast<double>(c)));
}

// Logprobs whose argmax per frame is the given column.
Tensor peaked(const std::vector<std::size_t>& cols, std::size_t c) {
  Tensor t(Shape{cols.size(), c}, std::log(0.1 / static_cast<double>(c - 1)));
  for (std::size_t i = 0; i < cols.size(); ++i) t.at(i, cols[i]) = std::log(0.9);
  return t;
}

}  // namespace

TEST_CASE("ctc examples") {
  CHECK(ctc_loss_value(uniform_logprobs(1, 3), {0}) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(ctc_loss_value(uniform_logprobs(2, 3), {0}) == doctest::Approx(-std::log(3.0 / 9.0)).epsilon(1e-14));
  CHECK_THROWS_AS(ctc_loss_value(uniform_logprobs(2, 3), {0, 1, 0}), InfeasibleTargetError);
  // Repeats need a separating blank.
  CHECK_THROWS_AS(ctc_loss_value(uniform_logprobs(2, 3), {1, 1}), InfeasibleTargetError);
  CHECK_NOTHROW(ctc_loss_value(uniform_logprobs(3, 3), {1, 1}));
  CHECK(ctc_min_frames({1, 1, 2, 2}) == 6);
  CHECK(ctc_min_frames({}) == 0);
}

TEST_CASE("ctc matches brute-force path enumeration") {
  std::mt19937_64 rng(21);
  double worst = 0.0;
  for (std::size_t vocab = 1; vocab <= 3; ++vocab)
    for (std::size_t t_len = 1; t_len <= 4; ++t_len) {
      const Tensor lp = oracle::random_logprobs(t_len, vocab + 1, rng);
      for (const auto& target : oracle::all_sequences(vocab, t_len)) {
        if (ctc_min_frames(target) > t_len) {
          CHECK_THROWS_AS(ctc_loss_value(lp, target), InfeasibleTargetError);
          continue;
        }
        worst = std::max(worst, std::abs(ctc_loss_value(lp, target) - oracle::brute_ctc(lp, target)));
      }
    }
  CHECK(worst < 1e-9);
}

TEST_CASE("ctc loss is non-negative and its gradient matches finite differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor lp = oracle::random_logprobs(6, 4, rng);
    const TokenSequence target{static_cast<std::size_t>(trial % 3), 2, static_cast<std::size_t>(trial % 2)};
    const CtcResult r = ctc_loss_and_grad(lp, target);
    CHECK(r.loss >= 0.0);
    CHECK(r.loss == ctc_loss_value(lp, target));
    // Through log_softmax so the check covers unnormalised inputs too.
    auto f = [&](Graph& g, Var x) { return ctc_loss(g, g.log_softmax(x), target); };
    CHECK(grad_check(f, lp, 1e-5) < 1e-4);
  }
}

TEST_CASE("greedy decode examples") {
  // Columns: 0 blank, 1 = token 0 (a), 2 = token 1 (b).
  CHECK(ctc_greedy_decode(peaked({0, 1, 1, 0, 2}, 3)) == TokenSequence{0, 1});
  CHECK(ctc_greedy_decode(peaked({0, 0, 0}, 3)).empty());
  CHECK(ctc_greedy_decode(peaked({1, 0, 1}, 3)) == TokenSequence{0, 0});
}

TEST_CASE("wer examples") {
  const TokenSequence phrase{1, 2, 3, 4, 5, 6};
  CHECK(wer(phrase, phrase) == 0.0);
  TokenSequence last = phrase;
  last.back() = 9;
  CHECK(wer(phrase, last) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK(wer(phrase, {}) == 1.0);
  CHECK_THROWS(wer({}, phrase));
}

TEST_CASE("edit distance matches the recursive oracle and is symmetric") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> len(0, 6), tok(0, 3);
  for (int i = 0; i < 300; ++i) {
    TokenSequence a(len(rng)), b(len(rng));
    for (auto& v : a) v = tok(rng);
    for (auto& v : b) v = tok(rng);
    CHECK(edit_distance(a, b) == oracle::edit_distance(a, b));
    CHECK(edit_distance(a, b) == edit_distance(b, a));
    CHECK(edit_distance(a, a) == 0);
  }
}

TEST_CASE("probabilities of all label sequences sum to one") {
  std::mt19937_64 rng(2);
  for (std::size_t vocab = 1; vocab <= 3; ++vocab)
    for (std::size_t t_len = 1; t_len <= 4; ++t_len) {
      const Tensor lp = oracle::random_logprobs(t_len, vocab + 1, rng);
      double mass = std::exp(-ctc_loss_value(lp, {}));
      for (const auto& target : oracle::all_sequences(vocab, t_len))
        if (ctc_min_frames(target) <= t_len) mass += std::exp(-ctc_loss_value(lp, target));
      CHECK(std::abs(mass - 1.0) < 1e-12);
    }
}
