#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avsync/attacks.hpp"
#include "avsync/avdata.hpp"
#include "avsync/detector.hpp"
#include "avsync/models.hpp"
#include "avsync/syncnet.hpp"
#include "avsync/training.hpp"

namespace avsync {

inline constexpr int kSchemaVersion = 1;

enum class AttackMethod { fgsm, bim, targeted };
std::string to_string(AttackMethod method);
AttackMethod parse_attack_method(const std::string& text);

struct AttackSpec {
  AttackMethod method = AttackMethod::targeted;
  std::vector<TokenSequence> targets;  // targeted only
  AttackConfig config;

  // Directory name inside a pipeline run, e.g. "bim" or "targeted-partial".
  std::string name() const;
};

// Everything a pipeline run needs. One global seed feeds every stochastic
// stage through derive_seed.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  CorpusConfig corpus;
  RecognizerConfig model;
  TrainConfig train;
  SyncConfig sync;
  SyncTrainConfig sync_train;
  std::vector<AttackSpec> attacks;
  double val_frac = 0.5;
  std::size_t hist_bins = 20;

  void validate() const;
};

// Stage seeds: splitmix64 of the global seed mixed with a stage number.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage);

// Default toy experiment: a sentence corpus attacked with the fully
// targeted attack.
ExperimentConfig default_experiment();

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys keep their defaults; schema_version is required.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// ---- attacks.jsonl ----

struct AttackRecord {
  std::string clip_id;
  std::string attack;
  double eps_a = 0.0;
  double eps_v = 0.0;
  std::size_t iterations = 0;
  bool success = false;
  std::optional<double> wer;  // sentence-level only
  double l2_v = 0.0;
  double linf_v = 0.0;
  std::optional<double> linf_a_db;

  friend bool operator==(const AttackRecord&, const AttackRecord&) = default;
};

nlohmann::json to_json(const AttackRecord& r);
AttackRecord attack_record_from_json(const nlohmann::json& j);
void write_attack_records(const std::filesystem::path& path, const std::vector<AttackRecord>& records);
std::vector<AttackRecord> read_attack_records(const std::filesystem::path& path);

// ---- scores.csv ----

struct ScoreRow {
  std::string clip_id;
  std::string kind;    // benign | adv
  std::string attack;  // "none" for benign rows
  int offset = 0;
  double confidence = 0.0;

  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

void write_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> read_scores(const std::filesystem::path& path);

// ---- report ----

struct ScoreSplit {
  std::vector<ScoredClip> validation;
  std::vector<ScoredClip> test;
};

// Stratified seeded split: round(val_frac * n) of each class go to validation.
ScoreSplit split_scores(const std::vector<ScoreRow>& rows, double val_frac, std::uint64_t seed);

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t benign = 0;
  std::size_t adv = 0;
};

// Equal-width bins spanning all confidences; the top edge is inclusive.
std::vector<HistogramBin> confidence_histogram(const std::vector<ScoreRow>& rows, std::size_t bins);

struct ReportOutput {
  nlohmann::json report;
  std::vector<RocPoint> roc;
  std::vector<HistogramBin> hist;
};

ReportOutput build_report(const std::vector<ScoreRow>& rows, const std::optional<std::vector<AttackRecord>>& attacks,
                          double val_frac, std::uint64_t seed, std::size_t bins);

// ---- subcommands ----

CorpusManifest run_gen_data(const ExperimentConfig& config, const std::filesystem::path& out);
TrainHistory run_train(Task task, const std::filesystem::path& corpus, const std::filesystem::path& out,
                       const ExperimentConfig& config);
std::vector<double> run_sync_train(const std::filesystem::path& corpus, const std::filesystem::path& out,
                                   const ExperimentConfig& config);
// Attacks every test clip (each target for the targeted attack) and writes
// the quantized adversarial clips, their manifest and attacks.jsonl.
std::vector<AttackRecord> run_attack(const AttackSpec& spec, const std::filesystem::path& model,
                                     const std::filesystem::path& corpus, const std::filesystem::path& out);
// Scores the benign test clips and every successful adversarial clip.
std::vector<ScoreRow> run_detect(const std::filesystem::path& sync, const std::filesystem::path& benign,
                                 const std::filesystem::path& adv, const std::filesystem::path& out);
ReportOutput run_report(const std::filesystem::path& scores, const std::optional<std::filesystem::path>& attacks,
                        double val_frac, std::uint64_t seed, std::size_t bins, const std::filesystem::path& out);

// gen-data -> train -> sync-train -> attack -> detect -> report under `out`.
// `log` receives one progress line per stage.
void run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out,
                  const std::function<void(const std::string&)>& log = {});

}  // namespace avsync
