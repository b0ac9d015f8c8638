#pragma once

#include <cstddef>

#include "avsync/avdata.hpp"
#include "avsync/graph.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

// Connectionist temporal classification over per-frame log-probabilities of
// shape [T, vocab + 1]. Column 0 is the blank; token k maps to column k + 1.

// Fewest frames able to emit `target`: one per token plus one blank between
// each pair of equal neighbours.
std::size_t ctc_min_frames(const TokenSequence& target);

struct CtcResult {
  double loss = 0.0;  // -log p(target | logprobs)
  Tensor grad;        // d loss / d logprobs, same shape as logprobs
};

// Throws InfeasibleTargetError when T < ctc_min_frames(target).
CtcResult ctc_loss_and_grad(const Tensor& logprobs, const TokenSequence& target);
double ctc_loss_value(const Tensor& logprobs, const TokenSequence& target);

// Graph node computing the CTC loss of a [T, vocab + 1] log-probability node.
Var ctc_loss(Graph& graph, Var logprobs, const TokenSequence& target);

// Best path: per-frame argmax, merge repeats, drop blanks.
TokenSequence ctc_greedy_decode(const Tensor& logprobs);

std::size_t edit_distance(const TokenSequence& a, const TokenSequence& b);
// Word error rate: edit distance / |reference|. Throws on an empty reference.
double wer(const TokenSequence& reference, const TokenSequence& hypothesis);

}  // namespace avsync
