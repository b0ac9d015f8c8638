#include "avsync/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "avsync/ctc.hpp"
#include "avsync/error.hpp"

namespace avsync {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

std::vector<LabeledClip> load_split(const CorpusManifest& manifest, Split split) {
  std::vector<LabeledClip> out;
  for (const ClipRecord* r : manifest.split(split)) {
    out.push_back({r->id, load_clip(manifest.root, *r), r->clip_label()});
  }
  return out;
}

SgdMomentum::SgdMomentum(const ParamSet& params, double learning_rate, double momentum, double grad_clip)
    : lr_(learning_rate), momentum_(momentum), clip_(grad_clip) {
  for (const auto& t : params.tensors) velocity_.emplace_back(t.shape(), 0.0);
}

void SgdMomentum::step(ParamSet& params, std::vector<Tensor>& grads) {
  double scale = 1.0;
  if (clip_ > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads)
      for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > clip_) scale = clip_ / norm;
  }
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto p = params.tensors[i].data();
    auto v = velocity_[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = momentum_ * v[k] - lr_ * scale * g[k];
      p[k] += v[k];
    }
  }
}

double word_accuracy(const WordModel& model, const std::vector<LabeledClip>& clips) {
  if (clips.empty()) throw ConfigError("accuracy over an empty split");
  std::size_t hits = 0;
  for (const auto& c : clips) hits += model.predict(c.clip) == std::get<WordLabel>(c.label).index ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(clips.size());
}

double mean_wer(const SeqModel& model, const std::vector<LabeledClip>& clips) {
  if (clips.empty()) throw ConfigError("WER over an empty split");
  double total = 0.0;
  for (const auto& c : clips) total += wer(std::get<TokenSequence>(c.label), model.transcribe(c.clip));
  return total / static_cast<double>(clips.size());
}

namespace {

using LossBuilder = std::function<Var(Graph&, std::span<const Var>, const LabeledClip&)>;

template <typename Model>
TrainHistory run_training(Model& model, const std::vector<LabeledClip>& train, const TrainConfig& config,
                          const LossBuilder& loss_of, const std::function<double()>& validate) {
  config.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  for (const auto& c : train) model.check_clip(c.clip);
  std::mt19937_64 rng(config.seed);
  SgdMomentum opt(model.params(), config.learning_rate, config.momentum, config.grad_clip);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainHistory history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> grads;
      for (const auto& t : model.params().tensors) grads.emplace_back(t.shape(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const LabeledClip& item = train[order[b]];
        Graph g;
        const auto p = model.params().bind(g, true);
        Var loss = loss_of(g, p, item);
        epoch_loss += g.value(loss).item();
        const Gradients grad = g.backward(loss);
        for (std::size_t i = 0; i < p.size(); ++i) {
          auto dst = grads[i].data();
          auto src = grad[p[i]].data();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& t : grads)
        for (double& v : t.data()) v *= inv;
      opt.step(model.params(), grads);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    history.val_metric.push_back(validate());
  }
  return history;
}

}  // namespace

TrainHistory train_word(WordModel& model, const std::vector<LabeledClip>& train, const std::vector<LabeledClip>& val,
                        const TrainConfig& config) {
  if (val.empty()) throw ConfigError("validation split is empty");
  return run_training(
      model, train, config,
      [&model](Graph& g, std::span<const Var> p, const LabeledClip& item) {
        Var logits = model.logits(g, p, g.constant(audio_tensor(item.clip)), g.constant(video_tensor(item.clip)));
        return cross_entropy(g, logits, std::get<WordLabel>(item.label).index);
      },
      [&] { return word_accuracy(model, val); });
}

TrainHistory train_seq(SeqModel& model, const std::vector<LabeledClip>& train, const std::vector<LabeledClip>& val,
                       const TrainConfig& config) {
  if (val.empty()) throw ConfigError("validation split is empty");
  return run_training(
      model, train, config,
      [&model](Graph& g, std::span<const Var> p, const LabeledClip& item) {
        Var lp = model.logprobs(g, p, g.constant(audio_tensor(item.clip)), g.constant(video_tensor(item.clip)));
        return ctc_loss(g, lp, std::get<TokenSequence>(item.label));
      },
      [&] { return mean_wer(model, val); });
}

TrainHistory train_word(WordModel& model, const CorpusManifest& corpus, const TrainConfig& config) {
  if (corpus.task != Task::word) throw ConfigError("word model needs a word corpus");
  return train_word(model, load_split(corpus, Split::train), load_split(corpus, Split::val), config);
}

TrainHistory train_seq(SeqModel& model, const CorpusManifest& corpus, const TrainConfig& config) {
  if (corpus.task != Task::seq) throw ConfigError("sequence model needs a sentence corpus");
  return train_seq(model, load_split(corpus, Split::train), load_split(corpus, Split::val), config);
}

}  // namespace avsync
