#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "avsync/avdata.hpp"
#include "avsync/models.hpp"

namespace avsync {

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 11;
  double momentum = 0.9;
  // Rescales the batch gradient when its global L2 norm exceeds this; 0 disables.
  double grad_clip = 5.0;

  void validate() const;
};

struct LabeledClip {
  std::string id;
  AvClip clip;
  ClipLabel label;
};

std::vector<LabeledClip> load_split(const CorpusManifest& manifest, Split split);

// Heavy-ball SGD: v <- momentum * v - lr * g; p <- p + v.
class SgdMomentum {
 public:
  SgdMomentum(const ParamSet& params, double learning_rate, double momentum, double grad_clip);
  void step(ParamSet& params, std::vector<Tensor>& grads);

 private:
  std::vector<Tensor> velocity_;
  double lr_, momentum_, clip_;
};

struct TrainHistory {
  std::vector<double> train_loss;  // mean per epoch
  std::vector<double> val_metric;  // accuracy (word) or mean WER (seq) per epoch
};

double word_accuracy(const WordModel& model, const std::vector<LabeledClip>& clips);
double mean_wer(const SeqModel& model, const std::vector<LabeledClip>& clips);

TrainHistory train_word(WordModel& model, const std::vector<LabeledClip>& train, const std::vector<LabeledClip>& val,
                        const TrainConfig& config);
TrainHistory train_seq(SeqModel& model, const std::vector<LabeledClip>& train, const std::vector<LabeledClip>& val,
                       const TrainConfig& config);

TrainHistory train_word(WordModel& model, const CorpusManifest& corpus, const TrainConfig& config);
TrainHistory train_seq(SeqModel& model, const CorpusManifest& corpus, const TrainConfig& config);

}  // namespace avsync
