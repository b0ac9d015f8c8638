#include "avsync/syncnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "avsync/error.hpp"

namespace avsync {

namespace fs = std::filesystem;
using nlohmann::json;

void SyncConfig::validate() const {
  if (window == 0) throw ConfigError("sync window must be at least one frame");
  if (samples_per_frame == 0 || height == 0 || width == 0) throw ConfigError("sync media dimensions must be positive");
  if (audio_hidden == 0 || video_hidden == 0 || embed == 0) throw ConfigError("sync layer sizes must be positive");
}

SyncConfig sync_config_for(const GenConfig& gen) {
  SyncConfig c;
  c.samples_per_frame = gen.samples_per_frame();
  c.height = gen.height;
  c.width = gen.width;
  return c;
}

SyncEmbedder::SyncEmbedder(SyncConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  add_dense(params_, config_.window * config_.pixels_per_frame(), config_.video_hidden, rng);
  add_dense(params_, config_.video_hidden, config_.embed, rng);
  add_dense(params_, config_.window * config_.samples_per_frame, config_.audio_hidden, rng);
  add_dense(params_, config_.audio_hidden, config_.embed, rng);
}

Var SyncEmbedder::embed_video(Graph& g, std::span<const Var> p, Var windows) const {
  const Shape s = g.shape(windows);
  Var v = g.scale(g.sub(windows, g.constant(Tensor(s, kPixelCenter))), kPixelScale);
  v = g.tanh(dense(g, v, p[0], p[1]));
  return dense(g, v, p[2], p[3]);
}

Var SyncEmbedder::embed_audio(Graph& g, std::span<const Var> p, Var windows) const {
  Var a = g.scale(windows, kAudioScale);
  a = g.tanh(dense(g, a, p[4], p[5]));
  return dense(g, a, p[6], p[7]);
}

void SyncEmbedder::check_clip(const AvClip& clip) const {
  if (clip.samples_per_frame() != config_.samples_per_frame || clip.height != config_.height ||
      clip.width != config_.width) {
    throw ShapeError("clip dimensions do not match the sync embedder");
  }
  if (clip.frames < config_.window) {
    throw ConfigError("clip has " + std::to_string(clip.frames) + " frames, sync windows need " +
                      std::to_string(config_.window));
  }
}

namespace {

// Flattened window starting at `start`; audio and video frames are contiguous.
template <typename T>
void copy_window(const std::vector<T>& media, std::size_t per_frame, std::size_t window, std::size_t start,
                 std::span<double> out) {
  const std::size_t base = start * per_frame;
  for (std::size_t i = 0; i < window * per_frame; ++i) out[i] = static_cast<double>(media[base + i]);
}

Tensor all_windows_audio(const AvClip& clip, std::size_t window) {
  const std::size_t n = clip.frames - window + 1;
  const std::size_t w = window * clip.samples_per_frame();
  Tensor t(Shape{n, w});
  for (std::size_t s = 0; s < n; ++s) copy_window(clip.audio, clip.samples_per_frame(), window, s, t.data().subspan(s * w, w));
  return t;
}

Tensor all_windows_video(const AvClip& clip, std::size_t window) {
  const std::size_t n = clip.frames - window + 1;
  const std::size_t w = window * clip.pixels_per_frame();
  Tensor t(Shape{n, w});
  for (std::size_t s = 0; s < n; ++s) copy_window(clip.video, clip.pixels_per_frame(), window, s, t.data().subspan(s * w, w));
  return t;
}

}  // namespace

Tensor SyncEmbedder::audio_embeddings(const AvClip& clip) const {
  check_clip(clip);
  Graph g;
  const auto p = params_.bind(g, false);
  return g.value(embed_audio(g, p, g.constant(all_windows_audio(clip, config_.window))));
}

Tensor SyncEmbedder::video_embeddings(const AvClip& clip) const {
  check_clip(clip);
  Graph g;
  const auto p = params_.bind(g, false);
  return g.value(embed_video(g, p, g.constant(all_windows_video(clip, config_.window))));
}

void SyncTrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (pairs_per_clip < 2) throw ConfigError("need at least one aligned and one shifted pair per clip");
  if (!(margin > 0.0)) throw ConfigError("contrastive margin must be positive");
  if (min_shift == 0) throw ConfigError("shifted pairs need a nonzero minimum shift");
}

Var contrastive_loss(Graph& g, Var video_embed, Var audio_embed, std::span<const WindowPair> pairs, double margin) {
  const std::size_t b = pairs.size();
  const std::size_t d = g.shape(video_embed)[1];
  Tensor pos(Shape{b}), neg(Shape{b});
  for (std::size_t i = 0; i < b; ++i) (pairs[i].aligned ? pos : neg)[i] = 1.0;
  Var diff = g.sub(video_embed, audio_embed);
  Var sq = g.scale(g.mean(g.mul(diff, diff), 1), static_cast<double>(d));
  Var hinge = g.relu(g.sub(g.constant(Tensor(Shape{b}, margin)), g.sqrt(sq)));
  Var per_pair = g.add(g.mul(sq, g.constant(pos)), g.mul(g.mul(hinge, hinge), g.constant(neg)));
  return g.mean(per_pair, 0);
}

namespace {

std::vector<WindowPair> sample_pairs(const std::vector<AvClip>& clips, const SyncTrainConfig& config, std::size_t window,
                                     std::mt19937_64& rng) {
  std::vector<WindowPair> pairs;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const std::size_t n = clips[c].frames - window + 1;
    const int radius = std::max<int>(static_cast<int>(config.min_shift), sync_radius(clips[c]));
    std::uniform_int_distribution<std::size_t> start(0, n - 1);
    std::uniform_int_distribution<int> shift(static_cast<int>(config.min_shift), radius);
    for (std::size_t i = 0; i < config.pairs_per_clip; ++i) {
      const std::size_t v = start(rng);
      if (i % 2 == 0) {
        pairs.push_back({c, v, v, true});
        continue;
      }
      // Redraw until the shifted audio window lies inside the clip.
      for (int tries = 0; tries < 64; ++tries) {
        const int k = (rng() & 1 ? 1 : -1) * shift(rng);
        const long a = static_cast<long>(v) + k;
        if (a >= 0 && a < static_cast<long>(n)) {
          pairs.push_back({c, v, static_cast<std::size_t>(a), false});
          break;
        }
      }
    }
  }
  return pairs;
}

}  // namespace

std::vector<double> train_sync(SyncEmbedder& embedder, const std::vector<AvClip>& clips, const SyncTrainConfig& config) {
  config.validate();
  if (clips.empty()) throw ConfigError("sync training needs at least one clip");
  const SyncConfig& sc = embedder.config();
  for (const auto& c : clips) {
    embedder.check_clip(c);
    if (c.frames < sc.window + config.min_shift) {
      throw ConfigError("clip too short for shifted sync windows");
    }
  }
  std::mt19937_64 rng(config.seed);
  SgdMomentum opt(embedder.params(), config.learning_rate, config.momentum, config.grad_clip);
  const std::size_t aw = sc.window * sc.samples_per_frame;
  const std::size_t vw = sc.window * sc.pixels_per_frame();
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<WindowPair> pairs = sample_pairs(clips, config, sc.window, rng);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < pairs.size(); start += config.batch_size) {
      const std::size_t end = std::min(pairs.size(), start + config.batch_size);
      const std::span<const WindowPair> batch(pairs.data() + start, end - start);
      Tensor video(Shape{batch.size(), vw}), audio(Shape{batch.size(), aw});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const AvClip& clip = clips[batch[i].clip];
        copy_window(clip.video, clip.pixels_per_frame(), sc.window, batch[i].video_start, video.data().subspan(i * vw, vw));
        copy_window(clip.audio, clip.samples_per_frame(), sc.window, batch[i].audio_start, audio.data().subspan(i * aw, aw));
      }
      Graph g;
      const auto p = embedder.params().bind(g, true);
      Var loss = contrastive_loss(g, embedder.embed_video(g, p, g.constant(std::move(video))),
                                  embedder.embed_audio(g, p, g.constant(std::move(audio))), batch, config.margin);
      total += g.value(loss).item() * static_cast<double>(batch.size());
      const Gradients grad = g.backward(loss);
      std::vector<Tensor> grads;
      for (Var v : p) grads.push_back(grad[v]);
      opt.step(embedder.params(), grads);
    }
    history.push_back(total / static_cast<double>(pairs.size()));
  }
  return history;
}

std::vector<double> train_sync(SyncEmbedder& embedder, const CorpusManifest& corpus, const SyncTrainConfig& config) {
  std::vector<AvClip> clips;
  for (const ClipRecord* r : corpus.split(Split::train)) clips.push_back(load_clip(corpus.root, *r));
  return train_sync(embedder, clips, config);
}

int sync_radius(const AvClip& clip) { return static_cast<int>(std::lround(static_cast<double>(clip.frame_rate) * 1.0)); }

SyncScore score_from_curve(std::vector<int> offsets, std::vector<double> distance) {
  if (offsets.size() != distance.size()) throw ShapeError("offset and distance curves differ in length");
  if (offsets.size() < 3) {
    throw DomainError("sync confidence needs at least 3 valid offsets, got " + std::to_string(offsets.size()));
  }
  SyncScore s;
  std::size_t best = 0;
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    const int ki = offsets[i], kb = offsets[best];
    if (distance[i] < distance[best] ||
        (distance[i] == distance[best] && (std::abs(ki) < std::abs(kb) || (std::abs(ki) == std::abs(kb) && ki < kb)))) {
      best = i;
    }
  }
  std::vector<double> sorted = distance;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  s.offset = offsets[best];
  s.confidence = std::max(0.0, median - distance[best]);
  s.offsets = std::move(offsets);
  s.distance = std::move(distance);
  return s;
}

SyncScore sync_score(const SyncEmbedder& embedder, const AvClip& clip) {
  const Tensor ve = embedder.video_embeddings(clip);
  const Tensor ae = embedder.audio_embeddings(clip);
  const long n = static_cast<long>(ve.dim(0));
  const std::size_t d = ve.dim(1);
  const int radius = sync_radius(clip);
  std::vector<int> offsets;
  std::vector<double> curve;
  for (int k = -radius; k <= radius; ++k) {
    double sum = 0.0;
    long count = 0;
    for (long w = std::max(0L, -static_cast<long>(k)); w < n && w + k < n; ++w) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = ve[w * d + j] - ae[(w + k) * d + j];
        sq += diff * diff;
      }
      sum += std::sqrt(sq);
      ++count;
    }
    if (count == 0) continue;
    offsets.push_back(k);
    curve.push_back(sum / static_cast<double>(count));
  }
  return score_from_curve(std::move(offsets), std::move(curve));
}

AvClip shift_audio(const AvClip& clip, int k) {
  clip.validate();
  AvClip out = clip;
  const long frames = static_cast<long>(clip.frames);
  const std::size_t spf = clip.samples_per_frame();
  for (long f = 0; f < frames; ++f) {
    const long src = ((f - k) % frames + frames) % frames;
    std::copy_n(clip.audio.begin() + src * static_cast<long>(spf), spf, out.audio.begin() + f * static_cast<long>(spf));
  }
  return out;
}

namespace {

json to_json(const SyncConfig& c) {
  return {{"window", c.window},
          {"samples_per_frame", c.samples_per_frame},
          {"height", c.height},
          {"width", c.width},
          {"layer_sizes",
           {{"video", {c.window * c.pixels_per_frame(), c.video_hidden, c.embed}},
            {"audio", {c.window * c.samples_per_frame, c.audio_hidden, c.embed}}}},
          {"embed", c.embed},
          {"seed", c.seed}};
}

SyncConfig sync_config_from_json(const json& j) {
  SyncConfig c;
  c.window = j.at("window").get<std::size_t>();
  c.samples_per_frame = j.at("samples_per_frame").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.video_hidden = j.at("layer_sizes").at("video").at(1).get<std::size_t>();
  c.audio_hidden = j.at("layer_sizes").at("audio").at(1).get<std::size_t>();
  c.embed = j.at("embed").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_sync(const fs::path& path, const SyncEmbedder& embedder) {
  Checkpoint c;
  c.header = to_json(embedder.config());
  c.header["kind"] = "sync";
  c.params = embedder.params();
  save_checkpoint(path, c);
}

SyncEmbedder load_sync(const fs::path& path) {
  Checkpoint c = load_checkpoint(path);
  if (c.header.value("kind", "") != "sync") {
    throw FormatError("checkpoint " + path.string() + " holds a '" + c.header.value("kind", "") +
                      "' model, expected 'sync'");
  }
  SyncEmbedder e = [&] {
    try {
      return SyncEmbedder(sync_config_from_json(c.header));
    } catch (const json::exception& ex) {
      throw FormatError("malformed sync checkpoint header in " + path.string() + ": " + ex.what());
    }
  }();
  if (e.params().tensors.size() != c.params.tensors.size()) throw FormatError("checkpoint layer count mismatch");
  for (std::size_t i = 0; i < c.params.tensors.size(); ++i) {
    if (e.params().tensors[i].shape() != c.params.tensors[i].shape()) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " has shape " +
                        shape_str(c.params.tensors[i].shape()) + ", expected " +
                        shape_str(e.params().tensors[i].shape()));
    }
  }
  e.params() = std::move(c.params);
  return e;
}

}  // namespace avsync
