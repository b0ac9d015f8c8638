#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "avsync/avdata.hpp"
#include "avsync/graph.hpp"
#include "avsync/models.hpp"
#include "avsync/training.hpp"

namespace avsync {

struct SyncConfig {
  std::size_t window = 5;  // frames per embedding window
  std::size_t samples_per_frame = 640;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t audio_hidden = 64;
  std::size_t video_hidden = 64;
  std::size_t embed = 32;
  std::uint64_t seed = 5;

  std::size_t pixels_per_frame() const { return height * width; }
  void validate() const;
};

SyncConfig sync_config_for(const GenConfig& gen);

// Window encoders: video [window*H*W] and audio [window*spf] are each mapped
// through dense-tanh-dense to a D-dim embedding.
class SyncEmbedder {
 public:
  explicit SyncEmbedder(SyncConfig config);

  const SyncConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Rows of the inputs are flattened windows in raw media units.
  Var embed_audio(Graph& g, std::span<const Var> p, Var windows) const;
  Var embed_video(Graph& g, std::span<const Var> p, Var windows) const;

  // Embeddings of every window start 0..T-window, shape [T-window+1, D].
  Tensor audio_embeddings(const AvClip& clip) const;
  Tensor video_embeddings(const AvClip& clip) const;

  void check_clip(const AvClip& clip) const;

 private:
  SyncConfig config_;
  ParamSet params_;
};

struct SyncTrainConfig {
  double learning_rate = 0.02;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;  // window pairs per update
  std::size_t pairs_per_clip = 16;  // per epoch, half aligned and half shifted
  double margin = 2.0;
  std::size_t min_shift = 2;
  std::uint64_t seed = 13;
  double momentum = 0.9;
  double grad_clip = 5.0;

  void validate() const;
};

// One training pair: video window start and audio window start.
struct WindowPair {
  std::size_t clip;
  std::size_t video_start;
  std::size_t audio_start;
  bool aligned;
};

// Contrastive loss over a batch: d^2 for aligned pairs, max(0, m - d)^2 for
// shifted ones, averaged over the batch.
Var contrastive_loss(Graph& g, Var video_embed, Var audio_embed, std::span<const WindowPair> pairs, double margin);

// Returns the mean training loss per epoch.
std::vector<double> train_sync(SyncEmbedder& embedder, const std::vector<AvClip>& clips, const SyncTrainConfig& config);
std::vector<double> train_sync(SyncEmbedder& embedder, const CorpusManifest& corpus, const SyncTrainConfig& config);

struct SyncScore {
  int offset = 0;
  double confidence = 0.0;
  std::vector<int> offsets;      // valid k in increasing order
  std::vector<double> distance;  // mean window distance per valid k
};

// Offset search radius R = round(frame_rate * 1 s).
int sync_radius(const AvClip& clip);

// Offsets are audio shifts: positive k compares video window w with audio
// window w + k, so audio that lags the video scores best at k > 0.
SyncScore sync_score(const SyncEmbedder& embedder, const AvClip& clip);

// Offset and confidence from a distance curve; curve must hold >= 3 points.
SyncScore score_from_curve(std::vector<int> offsets, std::vector<double> distance);

// Circularly delays the audio by k frames (k < 0 advances it).
AvClip shift_audio(const AvClip& clip, int k);

void save_sync(const std::filesystem::path& path, const SyncEmbedder& embedder);
SyncEmbedder load_sync(const std::filesystem::path& path);

}  // namespace avsync
