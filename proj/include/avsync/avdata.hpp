#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "avsync/tensor.hpp"

namespace avsync {

// Paired audio/video clip in raw media units: signed 16-bit PCM samples and
// 8-bit grayscale frames stored row-major, frame after frame.
struct AvClip {
  std::vector<std::int16_t> audio;
  std::vector<std::uint8_t> video;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int sample_rate = 16000;
  int frame_rate = 25;

  std::size_t samples_per_frame() const { return static_cast<std::size_t>(sample_rate / frame_rate); }
  std::size_t pixels_per_frame() const { return height * width; }

  // Throws FormatError if the buffers disagree with the declared dimensions.
  void validate() const;

  bool operator==(const AvClip&) const = default;
};

struct WordLabel {
  std::size_t index = 0;
  bool operator==(const WordLabel&) const = default;
};

using TokenSequence = std::vector<std::size_t>;
using ClipLabel = std::variant<WordLabel, TokenSequence>;

struct GenConfig {
  std::size_t frames = 29;
  std::size_t height = 16;
  std::size_t width = 16;
  int sample_rate = 16000;
  int frame_rate = 25;
  std::size_t vocab = 10;
  double amplitude = 10000.0;
  double audio_noise = 500.0;
  double pixel_noise = 5.0;
  // Multiplies the latent envelope; 0 yields silence and a closed mouth.
  double envelope_scale = 1.0;

  std::size_t samples_per_frame() const;
  void validate() const;
};

// Generator block of the manifest; missing keys keep their defaults.
nlohmann::json gen_to_json(const GenConfig& config);
GenConfig gen_from_json(const nlohmann::json& j);

// Carrier frequency of a token in Hz. Always a multiple of the frame rate,
// so every frame holds a whole number of carrier periods.
double carrier_hz(std::size_t token, const GenConfig& config);

// Hidden articulation signal behind a generated clip, one entry per frame.
struct ClipLatent {
  std::vector<double> envelope;      // frame-averaged envelope in [0, 1]
  std::vector<double> aperture;      // rendered vertical mouth semi-axis, pixels
  std::vector<std::ptrdiff_t> token; // active token per frame, -1 for silence
};

ClipLatent clip_latent(std::uint64_t seed, const ClipLabel& label, const GenConfig& config);
AvClip generate_clip(std::uint64_t seed, const ClipLabel& label, const GenConfig& config);

// Raw-unit real tensors: audio [frames, samples_per_frame], video [frames, H*W].
Tensor audio_tensor(const AvClip& clip);
Tensor video_tensor(const AvClip& clip);

// Per-frame RMS of the audio samples.
std::vector<double> frame_rms(const AvClip& clip);
// Per-frame dark-pixel mass, proportional to the rendered mouth area.
std::vector<double> frame_mouth_area(const AvClip& clip);

enum class Split { train, val, test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

enum class Task { word, seq };
std::string to_string(Task task);
Task parse_task(const std::string& text);

struct ClipRecord {
  std::string id;
  Split split = Split::train;
  std::optional<std::size_t> label;  // word task
  TokenSequence tokens;              // seq task
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int sample_rate = 0;
  int frame_rate = 0;
  std::uint64_t seed = 0;

  ClipLabel clip_label() const;
};

struct CorpusConfig {
  Task task = Task::word;
  std::size_t train = 60;
  std::size_t val = 20;
  std::size_t test = 20;
  std::size_t phrase_length = 6;  // seq task only
  std::uint64_t seed = 1;
  GenConfig gen;
};

// Word corpora default to 29-frame clips, sentence corpora to 75 frames.
CorpusConfig default_corpus_config(Task task);

struct CorpusManifest {
  std::filesystem::path root;
  Task task = Task::word;
  std::size_t vocab = 0;
  GenConfig gen;
  std::vector<ClipRecord> clips;

  std::vector<const ClipRecord*> split(Split which) const;
  const ClipRecord& find(const std::string& id) const;
};

CorpusManifest plan_corpus(const CorpusConfig& config, const std::filesystem::path& root);
// Generates every clip and writes manifest.json plus clips/<id>.{pcm,vid}.
CorpusManifest make_corpus(const CorpusConfig& config, const std::filesystem::path& root);

void write_manifest(const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& root);

std::filesystem::path audio_path(const std::filesystem::path& root, const std::string& id);
std::filesystem::path video_path(const std::filesystem::path& root, const std::string& id);

void save_clip(const AvClip& clip, const std::filesystem::path& root, const std::string& id);
AvClip load_clip(const std::filesystem::path& root, const ClipRecord& record);
// Regenerates a record's clip from its seed and the manifest generator block.
AvClip regenerate_clip(const CorpusManifest& manifest, const ClipRecord& record);

}  // namespace avsync
