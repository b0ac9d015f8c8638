#include "avsync/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "avsync/ctc.hpp"
#include "avsync/error.hpp"

namespace avsync {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::vector<Var> ParamSet::bind(Graph& graph, bool trainable) const {
  std::vector<Var> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(trainable ? graph.input(t) : graph.constant(t));
  return out;
}

void add_dense(ParamSet& params, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor w(Shape{fan_in, fan_out});
  for (double& v : w.data()) v = gauss(rng);
  params.tensors.push_back(std::move(w));
  params.tensors.emplace_back(Shape{fan_out}, 0.0);
}

Var dense(Graph& g, Var x, Var weight, Var bias) { return g.add_rows(g.matmul(x, weight), bias); }

RecognizerConfig recognizer_config_for(const GenConfig& gen) {
  RecognizerConfig c;
  c.vocab = gen.vocab;
  c.samples_per_frame = gen.samples_per_frame();
  c.height = gen.height;
  c.width = gen.width;
  return c;
}

TwoStreamModel::TwoStreamModel(RecognizerConfig config, std::size_t head_outputs) : config_(config) {
  std::mt19937_64 rng(config_.seed);
  add_dense(params_, config_.samples_per_frame, config_.audio_hidden, rng);
  add_dense(params_, config_.audio_hidden, config_.audio_out, rng);
  add_dense(params_, config_.pixels_per_frame(), config_.video_hidden, rng);
  add_dense(params_, config_.video_hidden, config_.video_out, rng);
  add_dense(params_, config_.audio_out + config_.video_out, head_outputs, rng);
}

Var TwoStreamModel::frame_features(Graph& g, std::span<const Var> p, Var audio, Var video) const {
  const Shape as = g.shape(audio);
  const Shape vs = g.shape(video);
  if (as.size() != 2 || vs.size() != 2 || as[0] != vs[0] || as[1] != config_.samples_per_frame ||
      vs[1] != config_.pixels_per_frame()) {
    throw ShapeError("model expects audio [T," + std::to_string(config_.samples_per_frame) + "] and video [T," +
                     std::to_string(config_.pixels_per_frame()) + "], got " + shape_str(as) + " and " +
                     shape_str(vs));
  }
  Var a = g.scale(audio, kAudioScale);
  a = g.tanh(dense(g, a, p[0], p[1]));
  a = g.tanh(dense(g, a, p[2], p[3]));
  Var v = g.scale(g.sub(video, g.constant(Tensor(vs, kPixelCenter))), kPixelScale);
  v = g.tanh(dense(g, v, p[4], p[5]));
  v = g.tanh(dense(g, v, p[6], p[7]));
  const Var parts[] = {a, v};
  return g.concat(parts, 1);
}

void TwoStreamModel::check_clip(const AvClip& clip) const {
  if (clip.samples_per_frame() != config_.samples_per_frame || clip.height != config_.height ||
      clip.width != config_.width) {
    throw ShapeError("clip dimensions (" + std::to_string(clip.samples_per_frame()) + " samples/frame, " +
                     std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                     ") do not match the model (" + std::to_string(config_.samples_per_frame) + ", " +
                     std::to_string(config_.height) + "x" + std::to_string(config_.width) + ")");
  }
}

WordModel::WordModel(RecognizerConfig config) : TwoStreamModel(config, config.vocab) {}

Var WordModel::logits(Graph& g, std::span<const Var> p, Var audio, Var video) const {
  Var fused = g.mean(frame_features(g, p, audio, video), 0);
  const std::size_t d = g.shape(fused)[0];
  Var row = g.reshape(fused, Shape{1, d});
  return g.reshape(dense(g, row, p[kHeadWeight], p[kHeadBias]), Shape{config_.vocab});
}

Tensor WordModel::logits(const AvClip& clip) const {
  check_clip(clip);
  Graph g;
  const auto p = params_.bind(g, false);
  return g.value(logits(g, p, g.constant(audio_tensor(clip)), g.constant(video_tensor(clip))));
}

std::size_t WordModel::predict(const AvClip& clip) const {
  const Tensor l = logits(clip);
  std::size_t best = 0;
  for (std::size_t i = 1; i < l.size(); ++i)
    if (l[i] > l[best]) best = i;
  return best;
}

Var cross_entropy(Graph& g, Var logits, std::size_t label) {
  if (label >= g.value(logits).size()) {
    throw ShapeError("label " + std::to_string(label) + " outside " + shape_str(g.shape(logits)));
  }
  return g.scale(g.sum(g.gather(g.log_softmax(logits), {label})), -1.0);
}

SeqModel::SeqModel(RecognizerConfig config) : TwoStreamModel(config, config.vocab + 1) {
  // Start out predicting mostly blanks; without this prior the early
  // all-blank phase of CTC training switches off most encoder units.
  params_.tensors[kHeadBias][0] = kBlankPrior;
}

Var SeqModel::logprobs(Graph& g, std::span<const Var> p, Var audio, Var video) const {
  Var fused = frame_features(g, p, audio, video);
  return g.log_softmax(dense(g, fused, p[kHeadWeight], p[kHeadBias]));
}

Tensor SeqModel::logprobs(const AvClip& clip) const {
  check_clip(clip);
  Graph g;
  const auto p = params_.bind(g, false);
  return g.value(logprobs(g, p, g.constant(audio_tensor(clip)), g.constant(video_tensor(clip))));
}

TokenSequence SeqModel::transcribe(const AvClip& clip) const { return ctc_greedy_decode(logprobs(clip)); }

json to_json(const RecognizerConfig& c) {
  return json{{"vocab", c.vocab},
              {"samples_per_frame", c.samples_per_frame},
              {"height", c.height},
              {"width", c.width},
              {"layer_sizes",
               {{"audio", {c.samples_per_frame, c.audio_hidden, c.audio_out}},
                {"video", {c.height * c.width, c.video_hidden, c.video_out}}}},
              {"seed", c.seed}};
}

RecognizerConfig recognizer_config_from_json(const json& j) {
  RecognizerConfig c;
  c.vocab = j.at("vocab").get<std::size_t>();
  c.samples_per_frame = j.at("samples_per_frame").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  const auto& ls = j.at("layer_sizes");
  c.audio_hidden = ls.at("audio").at(1).get<std::size_t>();
  c.audio_out = ls.at("audio").at(2).get<std::size_t>();
  c.video_hidden = ls.at("video").at(1).get<std::size_t>();
  c.video_out = ls.at("video").at(2).get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json header = ckpt.header;
  json shapes = json::array();
  for (const auto& t : ckpt.params.tensors) shapes.push_back(t.shape());
  header["param_shapes"] = shapes;
  header["param_count"] = ckpt.params.count();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << header.dump() << '\n';
  std::vector<char> buf(8);
  for (const auto& t : ckpt.params.tensors) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      os.write(buf.data(), 8);
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  Checkpoint ckpt;
  try {
    ckpt.header = json::parse(line);
    for (const auto& s : ckpt.header.at("param_shapes")) ckpt.params.tensors.emplace_back(s.get<Shape>(), 0.0);
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  const std::vector<char> rest((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::size_t want = ckpt.params.count() * 8;
  if (rest.size() != want) {
    throw FormatError("checkpoint " + path.string() + " has " + std::to_string(rest.size()) +
                      " parameter bytes, expected " + std::to_string(want));
  }
  std::size_t off = 0;
  for (auto& t : ckpt.params.tensors) {
    for (double& v : t.data()) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(rest[off + b])) << (8 * b);
      std::memcpy(&v, &bits, 8);
      off += 8;
    }
  }
  return ckpt;
}

namespace {

template <typename Model>
void save_recognizer(const fs::path& path, const Model& model, const char* kind) {
  Checkpoint c;
  c.header = to_json(model.config());
  c.header["kind"] = kind;
  c.params = model.params();
  save_checkpoint(path, c);
}

template <typename Model>
Model load_recognizer(const fs::path& path, const char* kind) {
  Checkpoint c = load_checkpoint(path);
  if (c.header.value("kind", "") != kind) {
    throw FormatError("checkpoint " + path.string() + " holds a '" + c.header.value("kind", "") + "' model, expected '" +
                      kind + "'");
  }
  Model m(recognizer_config_from_json(c.header));
  if (m.params().tensors.size() != c.params.tensors.size()) throw FormatError("checkpoint layer count mismatch");
  for (std::size_t i = 0; i < c.params.tensors.size(); ++i) {
    if (m.params().tensors[i].shape() != c.params.tensors[i].shape()) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " has shape " +
                        shape_str(c.params.tensors[i].shape()) + ", expected " +
                        shape_str(m.params().tensors[i].shape()));
    }
  }
  m.params() = std::move(c.params);
  return m;
}

}  // namespace

void save_model(const fs::path& path, const WordModel& model) { save_recognizer(path, model, "word"); }
void save_model(const fs::path& path, const SeqModel& model) { save_recognizer(path, model, "seq"); }

std::string checkpoint_kind(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  try {
    return json::parse(line).value("kind", "");
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
}

WordModel load_word_model(const fs::path& path) { return load_recognizer<WordModel>(path, "word"); }
SeqModel load_seq_model(const fs::path& path) { return load_recognizer<SeqModel>(path, "seq"); }

}  // namespace avsync
