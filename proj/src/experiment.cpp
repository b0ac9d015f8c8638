#include "avsync/experiment.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "avsync/ctc.hpp"
#include "avsync/error.hpp"

namespace avsync {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::fgsm:
      return "fgsm";
    case AttackMethod::bim:
      return "bim";
    case AttackMethod::targeted:
      return "targeted";
  }
  return "?";
}

AttackMethod parse_attack_method(const std::string& text) {
  if (text == "fgsm") return AttackMethod::fgsm;
  if (text == "bim") return AttackMethod::bim;
  if (text == "targeted") return AttackMethod::targeted;
  throw ConfigError("unknown attack method '" + text + "' (expected fgsm, bim or targeted)");
}

std::string AttackSpec::name() const {
  if (method == AttackMethod::targeted) return "targeted-" + to_string(config.mode);
  return to_string(method);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stage + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

enum Stage : std::uint64_t { kCorpus = 1, kModel, kTrain, kSyncModel, kSyncTrain, kReport };

void apply_seed(ExperimentConfig& c) {
  c.corpus.seed = derive_seed(c.seed, kCorpus);
  c.model.seed = derive_seed(c.seed, kModel);
  c.train.seed = derive_seed(c.seed, kTrain);
  c.sync.seed = derive_seed(c.seed, kSyncModel);
  c.sync_train.seed = derive_seed(c.seed, kSyncTrain);
}

}  // namespace

void ExperimentConfig::validate() const {
  corpus.gen.validate();
  train.validate();
  sync.validate();
  sync_train.validate();
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("val_frac must lie strictly between 0 and 1");
  if (hist_bins == 0) throw ConfigError("hist_bins must be positive");
  for (const auto& a : attacks) {
    a.config.validate();
    const bool word_attack = a.method != AttackMethod::targeted;
    if (word_attack != (corpus.task == Task::word)) {
      throw ConfigError(a.name() + " attack does not apply to a " + to_string(corpus.task) + " corpus");
    }
    if (!word_attack && a.targets.empty()) throw ConfigError("targeted attack needs at least one target phrase");
    for (const auto& t : a.targets) {
      if (t.empty()) throw ConfigError("empty target phrase");
      for (std::size_t tok : t)
        if (tok >= corpus.gen.vocab) throw ConfigError("target token " + std::to_string(tok) + " outside vocabulary");
    }
  }
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.corpus = default_corpus_config(Task::seq);
  c.corpus.train = 240;
  c.corpus.val = 40;
  c.corpus.test = 120;
  c.model = recognizer_config_for(c.corpus.gen);
  c.train.learning_rate = 0.02;
  c.train.epochs = 40;
  c.sync = sync_config_for(c.corpus.gen);
  AttackSpec targeted;
  targeted.method = AttackMethod::targeted;
  targeted.targets = {{1, 2, 3, 4, 5, 6}};
  c.attacks.push_back(targeted);
  apply_seed(c);
  return c;
}

namespace {

json attack_to_json(const AttackSpec& a) {
  json j{{"method", to_string(a.method)}};
  const AttackConfig& c = a.config;
  if (a.method == AttackMethod::targeted) {
    j["mode"] = to_string(c.mode);
    j["targets"] = a.targets;
    j["eps_a"] = c.init_eps_audio;
    j["eps_v"] = c.init_eps_video;
    j["iters"] = c.max_iterations;
    j["anneal"] = c.anneal;
  } else {
    j["eps_a"] = c.eps_audio;
    j["eps_v"] = c.eps_video;
    j["iters"] = c.iterations;
  }
  j["alpha_a"] = c.step_audio;
  j["alpha_v"] = c.step_video;
  return j;
}

AttackSpec attack_from_json(const json& j) {
  AttackSpec a;
  a.method = parse_attack_method(j.at("method").get<std::string>());
  AttackConfig& c = a.config;
  c.step_audio = j.value("alpha_a", c.step_audio);
  c.step_video = j.value("alpha_v", c.step_video);
  if (a.method == AttackMethod::targeted) {
    c.mode = parse_success_mode(j.value("mode", std::string("full")));
    a.targets = j.at("targets").get<std::vector<TokenSequence>>();
    c.init_eps_audio = j.value("eps_a", c.init_eps_audio);
    c.init_eps_video = j.value("eps_v", c.init_eps_video);
    c.max_iterations = j.value("iters", c.max_iterations);
    c.anneal = j.value("anneal", c.anneal);
  } else {
    c.eps_audio = j.value("eps_a", c.eps_audio);
    c.eps_video = j.value("eps_v", c.eps_video);
    c.iterations = j.value("iters", c.iterations);
  }
  return a;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json attacks = json::array();
  for (const auto& a : c.attacks) attacks.push_back(attack_to_json(a));
  return {{"schema_version", kSchemaVersion},
          {"seed", c.seed},
          {"corpus",
           {{"task", to_string(c.corpus.task)},
            {"train", c.corpus.train},
            {"val", c.corpus.val},
            {"test", c.corpus.test},
            {"phrase_length", c.corpus.phrase_length},
            {"generator", gen_to_json(c.corpus.gen)}}},
          {"model",
           {{"audio_hidden", c.model.audio_hidden},
            {"audio_out", c.model.audio_out},
            {"video_hidden", c.model.video_hidden},
            {"video_out", c.model.video_out}}},
          {"train",
           {{"learning_rate", c.train.learning_rate},
            {"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"momentum", c.train.momentum},
            {"grad_clip", c.train.grad_clip}}},
          {"sync",
           {{"window", c.sync.window},
            {"audio_hidden", c.sync.audio_hidden},
            {"video_hidden", c.sync.video_hidden},
            {"embed", c.sync.embed},
            {"learning_rate", c.sync_train.learning_rate},
            {"epochs", c.sync_train.epochs},
            {"batch_size", c.sync_train.batch_size},
            {"pairs_per_clip", c.sync_train.pairs_per_clip},
            {"margin", c.sync_train.margin},
            {"min_shift", c.sync_train.min_shift},
            {"momentum", c.sync_train.momentum},
            {"grad_clip", c.sync_train.grad_clip}}},
          {"attacks", attacks},
          {"report", {{"val_frac", c.val_frac}, {"hist_bins", c.hist_bins}}}};
}

ExperimentConfig experiment_from_json(const json& j) {
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    if (!j.contains("schema_version")) throw ConfigError("experiment config lacks schema_version");
    const int version = j.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      throw ConfigError("unsupported schema_version " + std::to_string(version) + " (expected " +
                        std::to_string(kSchemaVersion) + ")");
    }
    const json empty = json::object();
    const json& cj = j.value("corpus", empty);
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.corpus = default_corpus_config(parse_task(cj.value("task", std::string("seq"))));
    c.corpus.train = cj.value("train", c.corpus.train);
    c.corpus.val = cj.value("val", c.corpus.val);
    c.corpus.test = cj.value("test", c.corpus.test);
    c.corpus.phrase_length = cj.value("phrase_length", c.corpus.phrase_length);
    if (cj.contains("generator")) {
      json g = gen_to_json(c.corpus.gen);
      g.update(cj.at("generator"));
      c.corpus.gen = gen_from_json(g);
    }

    c.model = recognizer_config_for(c.corpus.gen);
    const json& mj = j.value("model", empty);
    c.model.audio_hidden = mj.value("audio_hidden", c.model.audio_hidden);
    c.model.audio_out = mj.value("audio_out", c.model.audio_out);
    c.model.video_hidden = mj.value("video_hidden", c.model.video_hidden);
    c.model.video_out = mj.value("video_out", c.model.video_out);

    const ExperimentConfig defaults = default_experiment();
    c.train = defaults.train;
    const json& tj = j.value("train", empty);
    c.train.learning_rate = tj.value("learning_rate", c.train.learning_rate);
    c.train.epochs = tj.value("epochs", c.train.epochs);
    c.train.batch_size = tj.value("batch_size", c.train.batch_size);
    c.train.momentum = tj.value("momentum", c.train.momentum);
    c.train.grad_clip = tj.value("grad_clip", c.train.grad_clip);

    c.sync = sync_config_for(c.corpus.gen);
    const json& sj = j.value("sync", empty);
    c.sync.window = sj.value("window", c.sync.window);
    c.sync.audio_hidden = sj.value("audio_hidden", c.sync.audio_hidden);
    c.sync.video_hidden = sj.value("video_hidden", c.sync.video_hidden);
    c.sync.embed = sj.value("embed", c.sync.embed);
    c.sync_train.learning_rate = sj.value("learning_rate", c.sync_train.learning_rate);
    c.sync_train.epochs = sj.value("epochs", c.sync_train.epochs);
    c.sync_train.batch_size = sj.value("batch_size", c.sync_train.batch_size);
    c.sync_train.pairs_per_clip = sj.value("pairs_per_clip", c.sync_train.pairs_per_clip);
    c.sync_train.margin = sj.value("margin", c.sync_train.margin);
    c.sync_train.min_shift = sj.value("min_shift", c.sync_train.min_shift);
    c.sync_train.momentum = sj.value("momentum", c.sync_train.momentum);
    c.sync_train.grad_clip = sj.value("grad_clip", c.sync_train.grad_clip);

    if (j.contains("attacks")) {
      for (const auto& a : j.at("attacks")) c.attacks.push_back(attack_from_json(a));
    } else if (c.corpus.task == Task::seq) {
      c.attacks = defaults.attacks;
    } else {
      c.attacks = {AttackSpec{AttackMethod::fgsm, {}, {}}, AttackSpec{AttackMethod::bim, {}, {}}};
    }

    const json& rj = j.value("report", empty);
    c.val_frac = rj.value("val_frac", c.val_frac);
    c.hist_bins = rj.value("hist_bins", c.hist_bins);
    apply_seed(c);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

// ---- attacks.jsonl ----

json to_json(const AttackRecord& r) {
  json j{{"clip_id", r.clip_id}, {"attack", r.attack},       {"eps_a", r.eps_a},
         {"eps_v", r.eps_v},     {"iterations", r.iterations}, {"success", r.success}};
  j["wer"] = r.wer ? json(*r.wer) : json(nullptr);
  j["l2_v"] = r.l2_v;
  j["linf_v"] = r.linf_v;
  j["linf_a_db"] = r.linf_a_db ? json(*r.linf_a_db) : json(nullptr);
  return j;
}

AttackRecord attack_record_from_json(const json& j) {
  try {
    AttackRecord r;
    r.clip_id = j.at("clip_id").get<std::string>();
    r.attack = j.at("attack").get<std::string>();
    r.eps_a = j.at("eps_a").get<double>();
    r.eps_v = j.at("eps_v").get<double>();
    r.iterations = j.at("iterations").get<std::size_t>();
    r.success = j.at("success").get<bool>();
    if (!j.at("wer").is_null()) r.wer = j.at("wer").get<double>();
    r.l2_v = j.at("l2_v").get<double>();
    r.linf_v = j.at("linf_v").get<double>();
    if (!j.at("linf_a_db").is_null()) r.linf_a_db = j.at("linf_a_db").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed attack record: ") + e.what());
  }
}

void write_attack_records(const fs::path& path, const std::vector<AttackRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) os << to_json(r).dump() << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<AttackRecord> read_attack_records(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open attack records " + path.string());
  std::vector<AttackRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(attack_record_from_json(j));
  }
  return out;
}

// ---- scores.csv ----

namespace {

std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

constexpr const char* kScoresHeader = "clip_id,kind,attack,offset,confidence";

}  // namespace

void write_scores(const fs::path& path, const std::vector<ScoreRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << kScoresHeader << '\n';
  for (const auto& r : rows) {
    os << r.clip_id << ',' << r.kind << ',' << r.attack << ',' << r.offset << ',' << fmt_real(r.confidence) << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<ScoreRow> read_scores(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open scores " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kScoresHeader) {
    throw FormatError(path.string() + ": expected header '" + kScoresHeader + "'");
  }
  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 5) throw FormatError(where + ": expected 5 columns, got " + std::to_string(cells.size()));
    ScoreRow r;
    r.clip_id = cells[0];
    r.kind = cells[1];
    r.attack = cells[2];
    if (r.kind != "benign" && r.kind != "adv") throw FormatError(where + ": kind must be benign or adv");
    try {
      std::size_t used = 0;
      r.offset = std::stoi(cells[3], &used);
      if (used != cells[3].size()) throw std::invalid_argument("offset");
      r.confidence = std::stod(cells[4], &used);
      if (used != cells[4].size()) throw std::invalid_argument("confidence");
    } catch (const std::logic_error&) {
      throw FormatError(where + ": bad numeric field");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- report ----

ScoreSplit split_scores(const std::vector<ScoreRow>& rows, double val_frac, std::uint64_t seed) {
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("val_frac must lie strictly between 0 and 1");
  std::vector<std::size_t> benign, adv;
  for (std::size_t i = 0; i < rows.size(); ++i) (rows[i].kind == "adv" ? adv : benign).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<bool> to_val(rows.size(), false);
  for (auto* cls : {&benign, &adv}) {
    std::vector<std::size_t> order = *cls;
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(order.size())));
    for (std::size_t k = 0; k < n_val; ++k) to_val[order[k]] = true;
  }
  ScoreSplit s;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ScoredClip c{rows[i].confidence, rows[i].kind == "adv"};
    (to_val[i] ? s.validation : s.test).push_back(c);
  }
  return s;
}

std::vector<HistogramBin> confidence_histogram(const std::vector<ScoreRow>& rows, std::size_t bins) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  if (rows.empty()) return {};
  double lo = rows.front().confidence, hi = lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.confidence);
    hi = std::max(hi, r.confidence);
  }
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<HistogramBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = lo + width * static_cast<double>(b);
    out[b].hi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  for (const auto& r : rows) {
    auto b = static_cast<std::size_t>((r.confidence - lo) / width);
    b = std::min(b, bins - 1);
    (r.kind == "adv" ? out[b].adv : out[b].benign) += 1;
  }
  return out;
}

ReportOutput build_report(const std::vector<ScoreRow>& rows, const std::optional<std::vector<AttackRecord>>& attacks,
                          double val_frac, std::uint64_t seed, std::size_t bins) {
  std::set<std::string> names;
  for (const auto& r : rows)
    if (r.kind == "adv") names.insert(r.attack);
  if (names.size() > 1) throw ConfigError("scores mix several attacks; report them separately");
  const std::string attack = names.empty() ? "none" : *names.begin();

  const ScoreSplit split = split_scores(rows, val_frac, seed);
  const ThresholdChoice choice = select_threshold(split.validation);
  const DetectionReport det = evaluate(split.test, choice.threshold);

  ReportOutput out;
  out.roc = roc_curve(split.test);
  out.hist = confidence_histogram(rows, bins);

  json eps_a = nullptr, eps_v = nullptr, mean_l2 = nullptr, mean_linf = nullptr, mean_db = nullptr,
       success_rate = nullptr;
  if (attacks) {
    std::vector<const AttackRecord*> recs;
    for (const auto& r : *attacks)
      if (names.empty() || r.attack == attack) recs.push_back(&r);
    if (!recs.empty()) {
      const bool same_a = std::all_of(recs.begin(), recs.end(), [&](auto* r) { return r->eps_a == recs[0]->eps_a; });
      const bool same_v = std::all_of(recs.begin(), recs.end(), [&](auto* r) { return r->eps_v == recs[0]->eps_v; });
      if (same_a) eps_a = recs[0]->eps_a;
      if (same_v) eps_v = recs[0]->eps_v;
      double l2 = 0.0, linf = 0.0, dbs = 0.0;
      std::size_t ok = 0, with_db = 0;
      for (const auto* r : recs) {
        if (!r->success) continue;
        ++ok;
        l2 += r->l2_v;
        linf += r->linf_v;
        if (r->linf_a_db) {
          dbs += *r->linf_a_db;
          ++with_db;
        }
      }
      success_rate = static_cast<double>(ok) / static_cast<double>(recs.size());
      if (ok > 0) {
        mean_l2 = l2 / static_cast<double>(ok);
        mean_linf = linf / static_cast<double>(ok);
      }
      if (with_db > 0) mean_db = dbs / static_cast<double>(with_db);
    }
  }

  out.report = json{{"attack", attack},
                    {"eps_a", eps_a},
                    {"eps_v", eps_v},
                    {"n_benign", det.n_benign},
                    {"n_adv", det.n_adv},
                    {"auc", det.auc},
                    {"threshold", det.threshold},
                    {"f1_benign", det.f1_benign},
                    {"f1_adv", det.f1_adv},
                    {"f1_avg", det.f1_avg},
                    {"mean_l2_v", mean_l2},
                    {"mean_linf_v", mean_linf},
                    {"mean_db_a", mean_db},
                    {"success_rate", success_rate},
                    {"val_frac", val_frac},
                    {"split_seed", seed}};
  return out;
}

// ---- subcommands ----

CorpusManifest run_gen_data(const ExperimentConfig& config, const fs::path& out) {
  config.validate();
  return make_corpus(config.corpus, out);
}

namespace {

RecognizerConfig model_config(const ExperimentConfig& config, const GenConfig& gen) {
  RecognizerConfig m = recognizer_config_for(gen);
  m.audio_hidden = config.model.audio_hidden;
  m.audio_out = config.model.audio_out;
  m.video_hidden = config.model.video_hidden;
  m.video_out = config.model.video_out;
  m.seed = config.model.seed;
  return m;
}

}  // namespace

TrainHistory run_train(Task task, const fs::path& corpus, const fs::path& out, const ExperimentConfig& config) {
  const CorpusManifest m = read_manifest(corpus);
  if (m.task != task) {
    throw ConfigError("corpus " + corpus.string() + " holds a " + to_string(m.task) + " task, not " + to_string(task));
  }
  const RecognizerConfig rc = model_config(config, m.gen);
  if (task == Task::word) {
    WordModel model(rc);
    TrainHistory h = train_word(model, m, config.train);
    save_model(out, model);
    return h;
  }
  SeqModel model(rc);
  TrainHistory h = train_seq(model, m, config.train);
  save_model(out, model);
  return h;
}

std::vector<double> run_sync_train(const fs::path& corpus, const fs::path& out, const ExperimentConfig& config) {
  const CorpusManifest m = read_manifest(corpus);
  SyncConfig sc = sync_config_for(m.gen);
  sc.window = config.sync.window;
  sc.audio_hidden = config.sync.audio_hidden;
  sc.video_hidden = config.sync.video_hidden;
  sc.embed = config.sync.embed;
  sc.seed = config.sync.seed;
  SyncEmbedder embedder(sc);
  std::vector<double> h = train_sync(embedder, m, config.sync_train);
  save_sync(out, embedder);
  return h;
}

std::vector<AttackRecord> run_attack(const AttackSpec& spec, const fs::path& model_path, const fs::path& corpus,
                                     const fs::path& out) {
  spec.config.validate();
  const CorpusManifest m = read_manifest(corpus);
  const std::string kind = checkpoint_kind(model_path);
  const bool targeted = spec.method == AttackMethod::targeted;
  if (targeted && (kind != "seq" || m.task != Task::seq)) {
    throw ConfigError("targeted attack needs a seq model and a seq corpus");
  }
  if (!targeted && (kind != "word" || m.task != Task::word)) {
    throw ConfigError(to_string(spec.method) + " attack needs a word model and a word corpus");
  }
  const auto clips = m.split(Split::test);
  if (clips.empty()) throw ConfigError("corpus " + corpus.string() + " has no test clips");
  if (targeted) {
    if (spec.targets.empty()) throw ConfigError("targeted attack needs at least one target phrase");
    for (const auto& t : spec.targets) {
      if (t.empty()) throw InfeasibleTargetError("target phrase is empty");
      for (const ClipRecord* r : clips) {
        if (ctc_min_frames(t) > r->frames) {
          throw InfeasibleTargetError("target needs " + std::to_string(ctc_min_frames(t)) + " frames, clip " + r->id +
                                      " has " + std::to_string(r->frames));
        }
      }
    }
  }

  CorpusManifest adv{out, m.task, m.vocab, m.gen, {}};
  std::vector<AttackRecord> records;
  auto record_of = [&](const std::string& id, const AdversarialExample& q) {
    AttackRecord r;
    r.clip_id = id;
    r.attack = to_string(spec.method);
    r.eps_a = targeted ? spec.config.init_eps_audio : spec.config.eps_audio;
    r.eps_v = targeted ? spec.config.init_eps_video : spec.config.eps_video;
    r.iterations = q.iterations;
    r.success = q.success;
    r.wer = q.achieved_wer;
    r.l2_v = q.distortion.l2_video;
    r.linf_v = q.distortion.linf_video;
    r.linf_a_db = q.distortion.linf_audio_db;
    return r;
  };
  auto keep = [&](const ClipRecord& original, const std::string& id, const AdversarialExample& q) {
    ClipRecord rec = original;
    rec.id = id;
    save_clip(q.adversarial_clip(), out, id);
    adv.clips.push_back(rec);
    records.push_back(record_of(id, q));
  };

  if (targeted) {
    const SeqModel model = load_seq_model(model_path);
    for (std::size_t t = 0; t < spec.targets.size(); ++t) {
      for (const ClipRecord* r : clips) {
        const AvClip clip = load_clip(corpus, *r);
        const AdversarialExample q = quantize(model, targeted_opt_attack(model, clip, spec.targets[t], spec.config));
        keep(*r, r->id + "-t" + std::to_string(t), q);
      }
    }
  } else {
    const WordModel model = load_word_model(model_path);
    for (const ClipRecord* r : clips) {
      const AvClip clip = load_clip(corpus, *r);
      const WordLabel label{*r->label};
      const AdversarialExample ex = spec.method == AttackMethod::fgsm ? fgsm(model, clip, label, spec.config)
                                                                       : bim(model, clip, label, spec.config);
      keep(*r, r->id, quantize(model, ex));
    }
  }
  write_manifest(adv);
  write_attack_records(out / "attacks.jsonl", records);
  return records;
}

std::vector<ScoreRow> run_detect(const fs::path& sync, const fs::path& benign, const fs::path& adv, const fs::path& out) {
  const SyncEmbedder embedder = load_sync(sync);
  const CorpusManifest bm = read_manifest(benign);
  const CorpusManifest am = read_manifest(adv);
  std::map<std::string, AttackRecord> by_id;
  for (auto& r : read_attack_records(adv / "attacks.jsonl")) by_id.emplace(r.clip_id, r);

  std::vector<ScoreRow> rows;
  for (const ClipRecord* r : bm.split(Split::test)) {
    const SyncScore s = sync_score(embedder, load_clip(benign, *r));
    rows.push_back({r->id, "benign", "none", s.offset, s.confidence});
  }
  for (const ClipRecord& r : am.clips) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw FormatError("adversarial clip " + r.id + " has no attack record");
    if (!it->second.success) continue;
    const SyncScore s = sync_score(embedder, load_clip(adv, r));
    rows.push_back({r.id, "adv", it->second.attack, s.offset, s.confidence});
  }
  write_scores(out / "scores.csv", rows);
  return rows;
}

ReportOutput run_report(const fs::path& scores, const std::optional<fs::path>& attacks, double val_frac,
                        std::uint64_t seed, std::size_t bins, const fs::path& out) {
  const std::vector<ScoreRow> rows = read_scores(scores);
  std::optional<std::vector<AttackRecord>> records;
  if (attacks) records = read_attack_records(*attacks);
  ReportOutput rep = build_report(rows, records, val_frac, seed, bins);

  fs::create_directories(out);
  {
    std::ofstream os(out / "report.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "report.json").string());
    os << rep.report.dump(2) << '\n';
  }
  {
    std::ofstream os(out / "roc.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "roc.csv").string());
    os << "fpr,tpr,threshold\n";
    for (const auto& p : rep.roc) os << fmt_real(p.fpr) << ',' << fmt_real(p.tpr) << ',' << fmt_real(p.threshold) << '\n';
  }
  {
    std::ofstream os(out / "hist.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "hist.csv").string());
    os << "bin_lo,bin_hi,benign,adv\n";
    for (const auto& b : rep.hist) os << fmt_real(b.lo) << ',' << fmt_real(b.hi) << ',' << b.benign << ',' << b.adv << '\n';
  }
  return rep;
}

void run_pipeline(const ExperimentConfig& config, const fs::path& out, const std::function<void(const std::string&)>& log) {
  config.validate();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  fs::create_directories(out);
  {
    std::ofstream os(out / "config.json", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (out / "config.json").string());
    os << to_json(config).dump(2) << '\n';
  }
  const fs::path corpus = out / "corpus";
  run_gen_data(config, corpus);
  say("gen-data: " + corpus.string());

  const fs::path model = out / "models" / (config.corpus.task == Task::word ? "word.ckpt" : "seq.ckpt");
  const TrainHistory h = run_train(config.corpus.task, corpus, model, config);
  say("train: " + model.string() + " final val metric " + fmt_real(h.val_metric.back()));

  const fs::path sync = out / "models" / "sync.ckpt";
  const std::vector<double> sh = run_sync_train(corpus, sync, config);
  say("sync-train: " + sync.string() + " final loss " + fmt_real(sh.back()));

  std::set<std::string> used;
  for (const auto& spec : config.attacks) {
    std::string name = spec.name();
    for (int k = 2; used.count(name); ++k) name = spec.name() + "-" + std::to_string(k);
    used.insert(name);
    const fs::path adv = out / "attacks" / name;
    const auto records = run_attack(spec, model, corpus, adv);
    say("attack " + name + ": " + std::to_string(records.size()) + " records");
    const fs::path det = out / "detect" / name;
    run_detect(sync, corpus, adv, det);
    const ReportOutput rep = run_report(det / "scores.csv", adv / "attacks.jsonl", config.val_frac,
                                        derive_seed(config.seed, kReport), config.hist_bins, out / "report" / name);
    say("report " + name + ": auc " + fmt_real(rep.report.at("auc").get<double>()));
  }
}

}  // namespace avsync
