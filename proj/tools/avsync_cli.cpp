// Command-line front end for the audio-visual attack/detection pipeline.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avsync/error.hpp"
#include "avsync/experiment.hpp"

namespace fs = std::filesystem;
using namespace avsync;

namespace {

// Exit codes, one per error family.
enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kConfig = 2,
  kMissingFile = 3,
  kInfeasible = 4,
  kFormat = 5,
  kShape = 6,
  kDomain = 7,
};

int exit_code_for(const Error& e) {
  const std::string k = e.kind();
  if (k == "bad_config") return kConfig;
  if (k == "io") return kMissingFile;
  if (k == "infeasible_target") return kInfeasible;
  if (k == "format") return kFormat;
  if (k == "shape_mismatch") return kShape;
  if (k == "domain") return kDomain;
  return kInternal;
}

int fail(const std::string& kind, const std::string& message, int code) {
  const nlohmann::json j{{"error", kind}, {"message", message}, {"exit_code", code}};
  std::cerr << j.dump() << std::endl;
  return code;
}

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? default_experiment() : load_experiment(path);
}

TokenSequence parse_target(const std::string& text) {
  std::string spaced = text;
  for (char& c : spaced)
    if (c == ',') c = ' ';
  std::istringstream is(spaced);
  TokenSequence out;
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    long v = -1;
    try {
      v = std::stol(tok, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != tok.size() || v < 0) throw ConfigError("target token '" + tok + "' is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw InfeasibleTargetError("target phrase is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic audio-visual adversarial attacks and sync-based detection"};
  app.require_subcommand(1);

  std::string config_path, out, corpus, task, model, method, mode = "full", sync, benign, adv, scores, attacks;
  std::vector<std::string> targets;
  double eps_a = -1, eps_v = -1, alpha_a = -1, alpha_v = -1, val_frac = 0.5;
  long iters = -1;
  std::uint64_t seed = 1;
  std::size_t bins = 20;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
  gen->add_option("--out", out, "Corpus directory")->required();

  auto* train = app.add_subcommand("train", "Train a word or sentence recognizer");
  train->add_option("--task", task, "word or seq")->required()->check(CLI::IsMember({"word", "seq"}));
  train->add_option("--corpus", corpus, "Corpus directory")->required();
  train->add_option("--out", out, "Checkpoint path")->required();
  train->add_option("--config", config_path, "Experiment config for model and training settings");

  auto* sync_train = app.add_subcommand("sync-train", "Train the audio-visual sync embedder");
  sync_train->add_option("--corpus", corpus, "Corpus directory")->required();
  sync_train->add_option("--out", out, "Checkpoint path")->required();
  sync_train->add_option("--config", config_path, "Experiment config for sync settings");

  auto* attack = app.add_subcommand("attack", "Attack every test clip of a corpus");
  attack->add_option("--method", method, "fgsm, bim or targeted")->required()->check(
      CLI::IsMember({"fgsm", "bim", "targeted"}));
  attack->add_option("--model", model, "Recognizer checkpoint")->required();
  attack->add_option("--corpus", corpus, "Corpus directory")->required();
  attack->add_option("--target", targets, "Target token sequence, e.g. \"1 2 3\"; repeat for several");
  attack->add_option("--mode", mode, "Targeted success mode: full or partial")->check(CLI::IsMember({"full", "partial"}));
  attack->add_option("--eps-a", eps_a, "Audio bound (initial bound for targeted), raw i16 units");
  attack->add_option("--eps-v", eps_v, "Video bound (initial bound for targeted), raw pixel units");
  attack->add_option("--alpha-a", alpha_a, "Audio step size");
  attack->add_option("--alpha-v", alpha_v, "Video step size");
  attack->add_option("--iters", iters, "BIM iterations or targeted iteration budget");
  attack->add_option("--out", out, "Output directory")->required();

  auto* detect = app.add_subcommand("detect", "Score benign and adversarial clips by sync confidence");
  detect->add_option("--sync", sync, "Sync checkpoint")->required();
  detect->add_option("--benign", benign, "Benign corpus directory")->required();
  detect->add_option("--adv", adv, "Attack output directory")->required();
  detect->add_option("--out", out, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Calibrate a threshold and report detection metrics");
  report->add_option("--scores", scores, "scores.csv")->required();
  report->add_option("--val-frac", val_frac, "Fraction of each class used for calibration");
  report->add_option("--attacks", attacks, "attacks.jsonl with distortion records");
  report->add_option("--seed", seed, "Split seed");
  report->add_option("--bins", bins, "Histogram bins");
  report->add_option("--out", out, "Output directory")->required();

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage from data generation to report");
  pipeline->add_option("--config", config_path, "Experiment config; defaults to the built-in toy setup");
  pipeline->add_option("--out", out, "Output directory")->required();

  auto* show = app.add_subcommand("default-config", "Print the default experiment config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), kConfig);
  }

  try {
    if (*show) {
      std::cout << to_json(default_experiment()).dump(2) << '\n';
    } else if (*gen) {
      const CorpusManifest m = run_gen_data(load_experiment(config_path), out);
      std::cout << "wrote " << m.clips.size() << " clips to " << out << '\n';
    } else if (*train) {
      const TrainHistory h = run_train(parse_task(task), corpus, out, config_or_default(config_path));
      std::cout << "final train loss " << h.train_loss.back() << ", val " << (task == "word" ? "accuracy " : "WER ")
                << h.val_metric.back() << '\n';
    } else if (*sync_train) {
      const std::vector<double> h = run_sync_train(corpus, out, config_or_default(config_path));
      std::cout << "final contrastive loss " << h.back() << '\n';
    } else if (*attack) {
      AttackSpec spec;
      spec.method = parse_attack_method(method);
      AttackConfig& c = spec.config;
      c.mode = parse_success_mode(mode);
      const bool targeted = spec.method == AttackMethod::targeted;
      if (eps_a >= 0) (targeted ? c.init_eps_audio : c.eps_audio) = eps_a;
      if (eps_v >= 0) (targeted ? c.init_eps_video : c.eps_video) = eps_v;
      if (alpha_a >= 0) c.step_audio = alpha_a;
      if (alpha_v >= 0) c.step_video = alpha_v;
      if (iters >= 0) (targeted ? c.max_iterations : c.iterations) = static_cast<std::size_t>(iters);
      for (const auto& t : targets) spec.targets.push_back(parse_target(t));
      if (targeted && spec.targets.empty()) throw ConfigError("targeted attack needs --target");
      if (!targeted && !spec.targets.empty()) throw ConfigError("--target only applies to the targeted attack");
      const auto records = run_attack(spec, model, corpus, out);
      std::size_t ok = 0;
      for (const auto& r : records) ok += r.success ? 1 : 0;
      std::cout << ok << " of " << records.size() << " attacks succeeded\n";
    } else if (*detect) {
      const auto rows = run_detect(sync, benign, adv, out);
      std::cout << "scored " << rows.size() << " clips\n";
    } else if (*report) {
      std::optional<fs::path> attack_file;
      if (!attacks.empty()) attack_file = attacks;
      const ReportOutput r = run_report(scores, attack_file, val_frac, seed, bins, out);
      std::cout << "auc " << r.report.at("auc").get<double>() << ", f1_avg " << r.report.at("f1_avg").get<double>()
                << '\n';
    } else if (*pipeline) {
      const auto t0 = std::chrono::steady_clock::now();
      run_pipeline(config_or_default(config_path), out, [&](const std::string& line) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%7.1fs] %s\n", s, line.c_str());
        std::fflush(stdout);
      });
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), exit_code_for(e));
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kInternal);
  }
  return kOk;
}
