#include "avsync/avdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include <json.hpp>

#include "avsync/error.hpp"

namespace avsync {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kBackground = 170.0;
constexpr double kMouth = 40.0;
constexpr int kSuper = 4;

struct Segment {
  std::size_t token;
  double start;  // frame units
  double length;
  double amplitude;
  int ripple;  // even, so the envelope peaks once, mid-segment
};

double token_amplitude(std::size_t token) { return 0.3 + 0.2 * static_cast<double>((token * 3) % 10) / 9.0; }

std::vector<Segment> layout(std::mt19937_64& rng, const ClipLabel& label, const GenConfig& config) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double frames = static_cast<double>(config.frames);
  std::vector<Segment> segs;
  auto make = [&](std::size_t token, double start, double length) {
    if (token >= config.vocab) {
      throw ConfigError("token " + std::to_string(token) + " outside vocabulary of " + std::to_string(config.vocab));
    }
    segs.push_back({token, start, length, token_amplitude(token) * (0.85 + 0.15 * unit(rng)),
                    2 + 2 * static_cast<int>(token % 3)});
  };
  if (const auto* word = std::get_if<WordLabel>(&label)) {
    const double length = frames * (0.5 + 0.2 * unit(rng));
    const double center = frames / 2.0 + 3.0 * (unit(rng) - 0.5);
    make(word->index, std::max(0.0, center - length / 2.0), length);
    return segs;
  }
  const auto& tokens = std::get<TokenSequence>(label);
  if (tokens.empty()) throw ConfigError("token sequence must not be empty");
  const std::size_t n = tokens.size();
  std::vector<double> gaps(n + 1);
  for (std::size_t i = 0; i <= n; ++i) gaps[i] = (i == 0 || i == n) ? 1.0 + 2.0 * unit(rng) : 1.0 + 1.5 * unit(rng);
  double available = frames;
  for (double g : gaps) available -= g;
  const double max_len = available / static_cast<double>(n);
  if (max_len < 2.0) {
    throw ConfigError(std::to_string(n) + " tokens do not fit in " + std::to_string(config.frames) + " frames");
  }
  std::vector<double> lengths(n);
  double used = 0.0;
  for (auto& l : lengths) {
    l = max_len * (0.8 + 0.2 * unit(rng));
    used += l;
  }
  double cursor = gaps[0] + (available - used) * unit(rng);
  for (std::size_t i = 0; i < n; ++i) {
    make(tokens[i], cursor, lengths[i]);
    cursor += lengths[i] + gaps[i + 1];
  }
  return segs;
}

// Envelope value and active segment at time tau (frame units).
std::pair<double, const Segment*> envelope_at(const std::vector<Segment>& segs, double tau, double scale) {
  for (const Segment& s : segs) {
    const double u = (tau - s.start) / s.length;
    if (u <= 0.0 || u >= 1.0) continue;
    const double r = std::sin(std::numbers::pi * s.ripple * u);
    const double e = s.amplitude * std::sin(std::numbers::pi * u) * (1.0 - 0.35 * r * r);
    return {std::clamp(e * scale, 0.0, 1.0), &s};
  }
  return {0.0, nullptr};
}

double aperture_for(double envelope, const GenConfig& config) {
  return 0.5 + 0.7 * static_cast<double>(config.height) * envelope;
}

struct Synthesis {
  std::vector<double> envelope;  // per audio sample
  std::vector<std::ptrdiff_t> token;
  ClipLatent latent;
};

Synthesis synthesize(std::mt19937_64& rng, const ClipLabel& label, const GenConfig& config) {
  config.validate();
  const auto segs = layout(rng, label, config);
  const std::size_t spf = config.samples_per_frame();
  const std::size_t n = config.frames * spf;
  Synthesis out;
  out.envelope.resize(n);
  out.token.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double tau = (static_cast<double>(i) + 0.5) / static_cast<double>(spf);
    auto [e, seg] = envelope_at(segs, tau, config.envelope_scale);
    out.envelope[i] = e;
    out.token[i] = seg ? static_cast<std::ptrdiff_t>(seg->token) : -1;
  }
  for (std::size_t f = 0; f < config.frames; ++f) {
    double mean = 0.0;
    for (std::size_t i = f * spf; i < (f + 1) * spf; ++i) mean += out.envelope[i];
    mean /= static_cast<double>(spf);
    out.latent.envelope.push_back(mean);
    out.latent.aperture.push_back(aperture_for(mean, config));
    const double mid = (static_cast<double>(f) + 0.5);
    auto [e, seg] = envelope_at(segs, mid, config.envelope_scale);
    (void)e;
    out.latent.token.push_back(seg ? static_cast<std::ptrdiff_t>(seg->token) : -1);
  }
  return out;
}

// Horizontal mouth semi-axis. Tokens share one of five lip shapes, silence
// uses the neutral one.
double mouth_half_width(std::ptrdiff_t token, const GenConfig& config) {
  const double w = static_cast<double>(config.width);
  if (token < 0) return 0.3 * w;
  return w * (0.18 + 0.04 * static_cast<double>(token % 5));
}

void render_frame(double aperture, double half_width, const GenConfig& config, std::span<double> out) {
  const double cx = static_cast<double>(config.width) / 2.0;
  const double cy = static_cast<double>(config.height) / 2.0;
  const double ax = half_width;
  for (std::size_t r = 0; r < config.height; ++r) {
    for (std::size_t c = 0; c < config.width; ++c) {
      int inside = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = static_cast<double>(c) + (sx + 0.5) / kSuper - cx;
          const double y = static_cast<double>(r) + (sy + 0.5) / kSuper - cy;
          if ((x * x) / (ax * ax) + (y * y) / (aperture * aperture) <= 1.0) ++inside;
        }
      }
      const double coverage = static_cast<double>(inside) / (kSuper * kSuper);
      out[r * config.width + c] = kBackground - (kBackground - kMouth) * coverage;
    }
  }
}

void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

json gen_to_json(const GenConfig& g) {
  return json{{"frames", g.frames},          {"height", g.height},
              {"width", g.width},            {"sample_rate", g.sample_rate},
              {"frame_rate", g.frame_rate},  {"vocab", g.vocab},
              {"amplitude", g.amplitude},    {"audio_noise", g.audio_noise},
              {"pixel_noise", g.pixel_noise}, {"envelope_scale", g.envelope_scale}};
}

GenConfig gen_from_json(const json& j) {
  GenConfig g;
  g.frames = j.value("frames", g.frames);
  g.height = j.value("height", g.height);
  g.width = j.value("width", g.width);
  g.sample_rate = j.value("sample_rate", g.sample_rate);
  g.frame_rate = j.value("frame_rate", g.frame_rate);
  g.vocab = j.value("vocab", g.vocab);
  g.amplitude = j.value("amplitude", g.amplitude);
  g.audio_noise = j.value("audio_noise", g.audio_noise);
  g.pixel_noise = j.value("pixel_noise", g.pixel_noise);
  g.envelope_scale = j.value("envelope_scale", g.envelope_scale);
  return g;
}


void AvClip::validate() const {
  if (frame_rate <= 0 || sample_rate <= 0 || sample_rate % frame_rate != 0) {
    throw FormatError("sample rate " + std::to_string(sample_rate) + " is not a multiple of frame rate " +
                      std::to_string(frame_rate));
  }
  if (audio.size() != frames * samples_per_frame()) {
    throw FormatError("audio holds " + std::to_string(audio.size()) + " samples, expected " +
                      std::to_string(frames * samples_per_frame()));
  }
  if (video.size() != frames * pixels_per_frame()) {
    throw FormatError("video holds " + std::to_string(video.size()) + " pixels, expected " +
                      std::to_string(frames * pixels_per_frame()));
  }
}

std::size_t GenConfig::samples_per_frame() const { return static_cast<std::size_t>(sample_rate / frame_rate); }

void GenConfig::validate() const {
  if (frames == 0) throw ConfigError("clip must have at least one frame");
  if (height == 0 || width == 0) throw ConfigError("frame dimensions must be positive");
  if (frame_rate <= 0 || sample_rate <= 0 || sample_rate % frame_rate != 0) {
    throw ConfigError("samples per frame is not an integer: " + std::to_string(sample_rate) + " / " +
                      std::to_string(frame_rate));
  }
  if (vocab == 0) throw ConfigError("vocabulary must not be empty");
  if (audio_noise < 0.0 || pixel_noise < 0.0) throw ConfigError("noise levels must be non-negative");
}

double carrier_hz(std::size_t token, const GenConfig& config) {
  return static_cast<double>(config.frame_rate) * static_cast<double>(10 + 3 * token);
}

ClipLatent clip_latent(std::uint64_t seed, const ClipLabel& label, const GenConfig& config) {
  std::mt19937_64 rng(seed);
  return synthesize(rng, label, config).latent;
}

AvClip generate_clip(std::uint64_t seed, const ClipLabel& label, const GenConfig& config) {
  std::mt19937_64 rng(seed);
  Synthesis syn = synthesize(rng, label, config);
  std::normal_distribution<double> gauss(0.0, 1.0);

  AvClip clip;
  clip.frames = config.frames;
  clip.height = config.height;
  clip.width = config.width;
  clip.sample_rate = config.sample_rate;
  clip.frame_rate = config.frame_rate;

  const std::size_t n = syn.envelope.size();
  clip.audio.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    if (syn.token[i] >= 0) {
      const double t = static_cast<double>(i) / config.sample_rate;
      v = config.amplitude * syn.envelope[i] *
          std::sin(2.0 * std::numbers::pi * carrier_hz(static_cast<std::size_t>(syn.token[i]), config) * t);
    }
    if (config.audio_noise > 0.0) v += config.audio_noise * gauss(rng);
    clip.audio[i] = static_cast<std::int16_t>(std::clamp(std::round(v), -32768.0, 32767.0));
  }

  const std::size_t ppf = clip.pixels_per_frame();
  clip.video.resize(config.frames * ppf);
  std::vector<double> frame(ppf);
  for (std::size_t f = 0; f < config.frames; ++f) {
    // A fully closed mouth has no viseme shape.
    const std::ptrdiff_t shape = syn.latent.envelope[f] > 0.0 ? syn.latent.token[f] : -1;
    render_frame(syn.latent.aperture[f], mouth_half_width(shape, config), config, frame);
    for (std::size_t p = 0; p < ppf; ++p) {
      double v = frame[p];
      if (config.pixel_noise > 0.0) v += config.pixel_noise * gauss(rng);
      clip.video[f * ppf + p] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
    }
  }
  return clip;
}

Tensor audio_tensor(const AvClip& clip) {
  Tensor t(Shape{clip.frames, clip.samples_per_frame()});
  for (std::size_t i = 0; i < clip.audio.size(); ++i) t[i] = clip.audio[i];
  return t;
}

Tensor video_tensor(const AvClip& clip) {
  Tensor t(Shape{clip.frames, clip.pixels_per_frame()});
  for (std::size_t i = 0; i < clip.video.size(); ++i) t[i] = clip.video[i];
  return t;
}

std::vector<double> frame_rms(const AvClip& clip) {
  const std::size_t spf = clip.samples_per_frame();
  std::vector<double> out(clip.frames);
  for (std::size_t f = 0; f < clip.frames; ++f) {
    double s = 0.0;
    for (std::size_t i = f * spf; i < (f + 1) * spf; ++i) s += static_cast<double>(clip.audio[i]) * clip.audio[i];
    out[f] = std::sqrt(s / static_cast<double>(spf));
  }
  return out;
}

std::vector<double> frame_mouth_area(const AvClip& clip) {
  const std::size_t ppf = clip.pixels_per_frame();
  std::vector<double> out(clip.frames);
  for (std::size_t f = 0; f < clip.frames; ++f) {
    double s = 0.0;
    for (std::size_t p = f * ppf; p < (f + 1) * ppf; ++p) s += (kBackground - clip.video[p]) / (kBackground - kMouth);
    out[f] = s;
  }
  return out;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw FormatError("unknown split '" + text + "'");
}

std::string to_string(Task task) { return task == Task::word ? "word" : "seq"; }

Task parse_task(const std::string& text) {
  if (text == "word") return Task::word;
  if (text == "seq") return Task::seq;
  throw ConfigError("unknown task '" + text + "' (expected word or seq)");
}

ClipLabel ClipRecord::clip_label() const {
  if (label) return WordLabel{*label};
  return tokens;
}

CorpusConfig default_corpus_config(Task task) {
  CorpusConfig c;
  c.task = task;
  c.gen.frames = task == Task::word ? 29 : 75;
  return c;
}

std::vector<const ClipRecord*> CorpusManifest::split(Split which) const {
  std::vector<const ClipRecord*> out;
  for (const auto& r : clips)
    if (r.split == which) out.push_back(&r);
  return out;
}

const ClipRecord& CorpusManifest::find(const std::string& id) const {
  for (const auto& r : clips)
    if (r.id == id) return r;
  throw FormatError("clip '" + id + "' not in manifest");
}

CorpusManifest plan_corpus(const CorpusConfig& config, const fs::path& root) {
  config.gen.validate();
  if (config.train == 0 || config.val == 0 || config.test == 0) {
    throw ConfigError("every split needs at least one clip");
  }
  if (config.task == Task::seq && config.phrase_length == 0) throw ConfigError("phrase length must be positive");
  CorpusManifest m;
  m.root = root;
  m.task = config.task;
  m.vocab = config.gen.vocab;
  m.gen = config.gen;
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> token(0, config.gen.vocab - 1);
  const std::pair<Split, std::size_t> splits[] = {
      {Split::train, config.train}, {Split::val, config.val}, {Split::test, config.test}};
  for (auto [split, count] : splits) {
    // Labels cycle through the classes so every class appears in each split
    // as soon as the split holds at least `vocab` clips.
    std::vector<std::size_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = i % config.gen.vocab;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < count; ++i) {
      ClipRecord r;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s-%04zu", to_string(split).c_str(), i);
      r.id = buf;
      r.split = split;
      if (config.task == Task::word) {
        r.label = labels[i];
      } else {
        for (std::size_t k = 0; k < config.phrase_length; ++k) r.tokens.push_back(token(rng));
      }
      r.frames = config.gen.frames;
      r.height = config.gen.height;
      r.width = config.gen.width;
      r.sample_rate = config.gen.sample_rate;
      r.frame_rate = config.gen.frame_rate;
      r.seed = rng();
      m.clips.push_back(std::move(r));
    }
  }
  return m;
}

CorpusManifest make_corpus(const CorpusConfig& config, const fs::path& root) {
  CorpusManifest m = plan_corpus(config, root);
  std::error_code ec;
  fs::create_directories(root / "clips", ec);
  if (ec) throw IoError("cannot create " + (root / "clips").string() + ": " + ec.message());
  for (const auto& r : m.clips) save_clip(regenerate_clip(m, r), root, r.id);
  write_manifest(m);
  return m;
}

AvClip regenerate_clip(const CorpusManifest& manifest, const ClipRecord& record) {
  GenConfig g = manifest.gen;
  g.frames = record.frames;
  g.height = record.height;
  g.width = record.width;
  g.sample_rate = record.sample_rate;
  g.frame_rate = record.frame_rate;
  return generate_clip(record.seed, record.clip_label(), g);
}

void write_manifest(const CorpusManifest& m) {
  json clips = json::array();
  for (const auto& r : m.clips) {
    clips.push_back({{"id", r.id},
                     {"split", to_string(r.split)},
                     {"label", r.label ? json(*r.label) : json(nullptr)},
                     {"tokens", r.tokens},
                     {"frames", r.frames},
                     {"height", r.height},
                     {"width", r.width},
                     {"sample_rate", r.sample_rate},
                     {"frame_rate", r.frame_rate},
                     {"seed", r.seed}});
  }
  json j{{"schema_version", 1},
         {"task", to_string(m.task)},
         {"vocab", m.vocab},
         {"generator", gen_to_json(m.gen)},
         {"clips", std::move(clips)}};
  const std::string text = j.dump(1) + "\n";
  write_bytes(m.root / "manifest.json", std::vector<char>(text.begin(), text.end()));
}

CorpusManifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) throw IoError("missing manifest " + path.string());
  json j;
  try {
    const auto bytes = read_bytes(path);
    j = json::parse(bytes.begin(), bytes.end());
    CorpusManifest m;
    m.root = root;
    m.task = parse_task(j.at("task").get<std::string>());
    m.vocab = j.at("vocab").get<std::size_t>();
    m.gen = gen_from_json(j.at("generator"));
    std::set<std::string> seen;
    for (const auto& c : j.at("clips")) {
      ClipRecord r;
      r.id = c.at("id").get<std::string>();
      if (!seen.insert(r.id).second) throw FormatError("duplicate clip id '" + r.id + "'");
      r.split = parse_split(c.at("split").get<std::string>());
      if (!c.at("label").is_null()) r.label = c.at("label").get<std::size_t>();
      r.tokens = c.at("tokens").get<TokenSequence>();
      r.frames = c.at("frames").get<std::size_t>();
      r.height = c.at("height").get<std::size_t>();
      r.width = c.at("width").get<std::size_t>();
      r.sample_rate = c.at("sample_rate").get<int>();
      r.frame_rate = c.at("frame_rate").get<int>();
      r.seed = c.at("seed").get<std::uint64_t>();
      m.clips.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
}

fs::path audio_path(const fs::path& root, const std::string& id) { return root / "clips" / (id + ".pcm"); }
fs::path video_path(const fs::path& root, const std::string& id) { return root / "clips" / (id + ".vid"); }

void save_clip(const AvClip& clip, const fs::path& root, const std::string& id) {
  clip.validate();
  std::error_code ec;
  fs::create_directories(root / "clips", ec);
  std::vector<char> pcm(clip.audio.size() * 2);
  for (std::size_t i = 0; i < clip.audio.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(clip.audio[i]);
    pcm[2 * i] = static_cast<char>(u & 0xff);
    pcm[2 * i + 1] = static_cast<char>(u >> 8);
  }
  write_bytes(audio_path(root, id), pcm);
  write_bytes(video_path(root, id), std::vector<char>(clip.video.begin(), clip.video.end()));
}

AvClip load_clip(const fs::path& root, const ClipRecord& r) {
  AvClip clip;
  clip.frames = r.frames;
  clip.height = r.height;
  clip.width = r.width;
  clip.sample_rate = r.sample_rate;
  clip.frame_rate = r.frame_rate;
  if (r.frame_rate <= 0 || r.sample_rate % r.frame_rate != 0) {
    throw FormatError("clip '" + r.id + "' has a non-integer samples-per-frame");
  }
  const std::size_t want_audio = r.frames * clip.samples_per_frame() * 2;
  const std::size_t want_video = r.frames * clip.pixels_per_frame();
  const auto pcm = read_bytes(audio_path(root, r.id));
  if (pcm.size() != want_audio) {
    throw FormatError("audio file for '" + r.id + "' has " + std::to_string(pcm.size()) + " bytes, expected " +
                      std::to_string(want_audio));
  }
  const auto vid = read_bytes(video_path(root, r.id));
  if (vid.size() != want_video) {
    throw FormatError("video file for '" + r.id + "' has " + std::to_string(vid.size()) + " bytes, expected " +
                      std::to_string(want_video));
  }
  clip.audio.resize(pcm.size() / 2);
  for (std::size_t i = 0; i < clip.audio.size(); ++i) {
    const auto lo = static_cast<std::uint8_t>(pcm[2 * i]);
    const auto hi = static_cast<std::uint8_t>(pcm[2 * i + 1]);
    clip.audio[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  clip.video.assign(vid.begin(), vid.end());
  return clip;
}

}  // namespace avsync
