#include "avsync/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "avsync/error.hpp"

namespace avsync {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t ctc_min_frames(const TokenSequence& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

CtcResult ctc_loss_and_grad(const Tensor& logprobs, const TokenSequence& target) {
  if (logprobs.rank() != 2) throw ShapeError("ctc: logprobs must be [T, K], got " + shape_str(logprobs.shape()));
  const std::size_t T = logprobs.dim(0);
  const std::size_t K = logprobs.dim(1);
  for (std::size_t tok : target) {
    if (tok + 1 >= K) {
      throw ShapeError("ctc: token " + std::to_string(tok) + " outside output alphabet of " + std::to_string(K - 1));
    }
  }
  if (T < ctc_min_frames(target) || T == 0) {
    throw InfeasibleTargetError("target of length " + std::to_string(target.size()) + " needs at least " +
                                std::to_string(ctc_min_frames(target)) + " frames, clip has " + std::to_string(T));
  }

  // Blank-interleaved labels: blank, t0, blank, t1, ..., blank.
  const std::size_t S = 2 * target.size() + 1;
  std::vector<std::size_t> ext(S, 0);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i] + 1;
  auto lp = [&](std::size_t t, std::size_t s) { return logprobs[t * K + ext[s]]; };
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2]; };

  // alpha includes the emission at t; beta covers frames after t only.
  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = lp(0, 0);
  if (S > 1) alpha[1] = lp(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNegInf ? kNegInf : a + lp(t, s);
    }
  }
  beta[(T - 1) * S + S - 1] = 0.0;
  if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s] + lp(t + 1, s);
      if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1] + lp(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2] + lp(t + 1, s + 2));
      beta[t * S + s] = b;
    }
  }
  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = log_add(log_p, alpha[(T - 1) * S + S - 2]);
  if (log_p == kNegInf) throw InfeasibleTargetError("target has zero probability under the given logprobs");

  CtcResult out;
  out.loss = -log_p;
  out.grad = Tensor(logprobs.shape(), 0.0);
  std::vector<double> occ(K);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    for (std::size_t s = 0; s < S; ++s) occ[ext[s]] = log_add(occ[ext[s]], alpha[t * S + s] + beta[t * S + s]);
    for (std::size_t k = 0; k < K; ++k) {
      if (occ[k] != kNegInf) out.grad[t * K + k] = -std::exp(occ[k] - log_p);
    }
  }
  return out;
}

double ctc_loss_value(const Tensor& logprobs, const TokenSequence& target) {
  return ctc_loss_and_grad(logprobs, target).loss;
}

Var ctc_loss(Graph& graph, Var logprobs, const TokenSequence& target) {
  CtcResult r = ctc_loss_and_grad(graph.value(logprobs), target);
  return graph.custom({logprobs}, Tensor::scalar(r.loss),
                      [grad = std::move(r.grad)](const Graph&, const Tensor& g, std::span<Tensor* const> in) {
                        for (std::size_t i = 0; i < grad.size(); ++i) (*in[0])[i] += g[0] * grad[i];
                      });
}

TokenSequence ctc_greedy_decode(const Tensor& logprobs) {
  if (logprobs.rank() != 2) throw ShapeError("decode: logprobs must be [T, K], got " + shape_str(logprobs.shape()));
  const std::size_t T = logprobs.dim(0);
  const std::size_t K = logprobs.dim(1);
  TokenSequence out;
  std::size_t prev = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = logprobs.data().data() + t * K;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + K) - row);
    if (best != 0 && best != prev) out.push_back(best - 1);
    prev = best;
  }
  return out;
}

std::size_t edit_distance(const TokenSequence& a, const TokenSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(const TokenSequence& reference, const TokenSequence& hypothesis) {
  if (reference.empty()) throw DomainError("word error rate needs a non-empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

}  // namespace avsync
