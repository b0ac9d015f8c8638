#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "avsync/avdata.hpp"
#include "avsync/graph.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

// Raw media -> model input mapping. Attack budgets are expressed in raw units
// and the mapping happens inside the graph.
inline constexpr double kAudioScale = 1.0 / 32768.0;
inline constexpr double kPixelScale = 1.0 / 255.0;
// Pixels are centred before scaling so the video input lies in [-0.5, 0.5].
inline constexpr double kPixelCenter = 170.0;

// Trainable tensors in a fixed declaration order.
struct ParamSet {
  std::vector<Tensor> tensors;

  std::size_t count() const;
  // Adds every tensor to the graph, as inputs when gradients are wanted.
  std::vector<Var> bind(Graph& graph, bool trainable) const;
};

// He-normal weights [fan_in, fan_out] and zero bias.
void add_dense(ParamSet& params, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

Var dense(Graph& g, Var x, Var weight, Var bias);

struct RecognizerConfig {
  std::size_t vocab = 10;
  std::size_t samples_per_frame = 640;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t audio_hidden = 32;
  std::size_t audio_out = 16;
  std::size_t video_hidden = 32;
  std::size_t video_out = 16;
  std::uint64_t seed = 7;

  std::size_t pixels_per_frame() const { return height * width; }
};

RecognizerConfig recognizer_config_for(const GenConfig& gen);

// Per-frame audio and video encoders shared by both recognizers:
// two dense layers with tanh each, concatenated per frame.
class TwoStreamModel {
 public:
  explicit TwoStreamModel(RecognizerConfig config, std::size_t head_outputs);
  virtual ~TwoStreamModel() = default;

  const RecognizerConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // [T, audio_out + video_out] fused per-frame features from raw-unit inputs
  // audio [T, samples_per_frame] and video [T, H*W].
  Var frame_features(Graph& g, std::span<const Var> p, Var audio, Var video) const;
  void check_clip(const AvClip& clip) const;

 protected:
  RecognizerConfig config_;
  ParamSet params_;
  static constexpr std::size_t kHeadWeight = 8;
  static constexpr std::size_t kHeadBias = 9;
};

// Word-level classifier: fused features -> temporal mean -> dense -> V logits.
class WordModel : public TwoStreamModel {
 public:
  explicit WordModel(RecognizerConfig config);

  Var logits(Graph& g, std::span<const Var> p, Var audio, Var video) const;
  Tensor logits(const AvClip& clip) const;
  std::size_t predict(const AvClip& clip) const;
};

// Cross-entropy of logits [V] against a class index.
Var cross_entropy(Graph& g, Var logits, std::size_t label);

// Initial blank logit of the sequence head.
inline constexpr double kBlankPrior = 4.0;

// Sentence-level model: per-frame dense head over fused features producing
// [T, vocab + 1] log-probabilities, blank at column 0.
class SeqModel : public TwoStreamModel {
 public:
  explicit SeqModel(RecognizerConfig config);

  Var logprobs(Graph& g, std::span<const Var> p, Var audio, Var video) const;
  Tensor logprobs(const AvClip& clip) const;
  TokenSequence transcribe(const AvClip& clip) const;
};

// Checkpoint file: one line of JSON header, a newline, then every parameter
// as a 64-bit little-endian double in declaration order.
struct Checkpoint {
  nlohmann::json header;
  ParamSet params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const RecognizerConfig& c);
RecognizerConfig recognizer_config_from_json(const nlohmann::json& j);

void save_model(const std::filesystem::path& path, const WordModel& model);
void save_model(const std::filesystem::path& path, const SeqModel& model);
// Reads the header's "kind" to tell word and seq checkpoints apart.
std::string checkpoint_kind(const std::filesystem::path& path);
WordModel load_word_model(const std::filesystem::path& path);
SeqModel load_seq_model(const std::filesystem::path& path);

}  // namespace avsync
