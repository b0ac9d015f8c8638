#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "avsync/error.hpp"
#include "avsync/experiment.hpp"
#include "fixtures.hpp"

using namespace avsync;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

// Small word-level experiment that runs in a few seconds.
ExperimentConfig tiny_config() {
  const json j = json::parse(R"({
    "schema_version": 1,
    "seed": 5,
    "corpus": {"task": "word", "train": 20, "val": 6, "test": 12},
    "train": {"epochs": 2},
    "sync": {"epochs": 1, "pairs_per_clip": 4},
    "attacks": [{"method": "bim", "eps_a": 1024, "eps_v": 16}]
  })");
  return experiment_from_json(j);
}

const fs::path& tiny_run() {
  static const fs::path out = [] {
    const fs::path p = fixtures::scratch("tiny_run");
    run_pipeline(tiny_config(), p);
    return p;
  }();
  return out;
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args) {
  const fs::path err = fixtures::scratch_root() / "cli_stderr.txt";
  const std::string cmd = std::string(AVSYNC_CLI) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::vector<ScoreRow> synthetic_rows(std::size_t nb, std::size_t na, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<ScoreRow> rows;
  for (std::size_t i = 0; i < nb; ++i) rows.push_back({"b" + std::to_string(i), "benign", "none", 0, 3.0 + g(rng)});
  for (std::size_t i = 0; i < na; ++i)
    rows.push_back({"a" + std::to_string(i), "adv", "bim", static_cast<int>(i % 3) - 1, 1.5 + g(rng)});
  return rows;
}

}  // namespace

TEST_CASE("experiment config round-trips through json") {
  ExperimentConfig c = default_experiment();
  c.seed = 99;
  c.val_frac = 0.3;
  c.attacks.push_back({AttackMethod::targeted, {{1, 2}, {3}}, AttackConfig{}});
  c.attacks.back().config.mode = SuccessMode::partial;
  const ExperimentConfig back = experiment_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(back.attacks.size() == 2);
  CHECK(back.attacks[1].name() == "targeted-partial");
  CHECK(back.attacks[1].targets == std::vector<TokenSequence>{{1, 2}, {3}});
}

TEST_CASE("config schema errors") {
  CHECK_THROWS_AS(experiment_from_json(json::parse(R"({"seed": 1})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::parse(R"({"schema_version": 2})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::parse(R"([1, 2])")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::parse(R"({"schema_version": 1, "seed": "x"})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::parse(
                      R"({"schema_version": 1, "corpus": {"task": "word"}, "attacks": [{"method": "targeted"}]})")),
                  ConfigError);
  CHECK_THROWS_AS(experiment_from_json(json::parse(R"({"schema_version": 1, "report": {"val_frac": 1.0}})")),
                  ConfigError);

  const fs::path dir = fixtures::scratch("configs");
  fs::create_directories(dir);
  spit(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(load_experiment(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_experiment(dir / "absent.json"), IoError);
}

TEST_CASE("stage seeds differ by stage and by global seed") {
  CHECK(derive_seed(1, 1) != derive_seed(1, 2));
  CHECK(derive_seed(1, 1) != derive_seed(2, 1));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("attack records round-trip through jsonl") {
  std::vector<AttackRecord> rs(3);
  rs[0] = {"c1", "targeted", 2048, 32, 17, true, 0.0, 2.5, 7, -12.25};
  rs[1] = {"c2", "bim", 1024, 16, 20, false, std::nullopt, 4.0 / 3.0, 16, std::nullopt};
  rs[2] = {"c3", "fgsm", 0.1, 0.2, 1, true, std::nullopt, 1e-17, 0.3, -0.1};
  const fs::path p = fixtures::scratch("records.jsonl");
  write_attack_records(p, rs);
  CHECK(read_attack_records(p) == rs);
  const json first = json::parse(slurp(p).substr(0, slurp(p).find('\n')));
  for (const char* key : {"clip_id", "attack", "eps_a", "eps_v", "iterations", "success", "wer", "l2_v", "linf_v",
                          "linf_a_db"})
    CHECK(first.contains(key));
  spit(p, "{\"clip_id\": 3}\n");
  CHECK_THROWS_AS(read_attack_records(p), FormatError);
}

TEST_CASE("score tables round-trip exactly") {
  auto rows = synthetic_rows(5, 4, 1);
  rows[0].confidence = 0.1 + 0.2;
  const fs::path p = fixtures::scratch("scores.csv");
  write_scores(p, rows);
  CHECK(slurp(p).rfind("clip_id,kind,attack,offset,confidence\n", 0) == 0);
  CHECK(read_scores(p) == rows);

  spit(p, "clip_id,kind,attack,offset,confidence\nx,benign,none,0\n");
  CHECK_THROWS_AS(read_scores(p), FormatError);
  spit(p, "clip_id,kind,attack,offset,confidence\nx,weird,none,0,1\n");
  CHECK_THROWS_AS(read_scores(p), FormatError);
  spit(p, "clip_id,kind,attack,offset,confidence\nx,benign,none,0,1.5abc\n");
  CHECK_THROWS_AS(read_scores(p), FormatError);
  spit(p, "id,kind\n");
  CHECK_THROWS_AS(read_scores(p), FormatError);
}

TEST_CASE("score split is stratified and seeded") {
  const auto rows = synthetic_rows(31, 20, 2);
  const ScoreSplit s = split_scores(rows, 0.5, 4);
  std::size_t vb = 0, va = 0, tb = 0, ta = 0;
  for (const auto& c : s.validation) (c.adversarial ? va : vb)++;
  for (const auto& c : s.test) (c.adversarial ? ta : tb)++;
  CHECK(vb == 16);  // round(15.5)
  CHECK(va == 10);
  CHECK(tb == 15);
  CHECK(ta == 10);
  const ScoreSplit again = split_scores(rows, 0.5, 4);
  CHECK(again.test.size() == s.test.size());
  for (std::size_t i = 0; i < s.test.size(); ++i) CHECK(again.test[i].score == s.test[i].score);
  const ScoreSplit other = split_scores(rows, 0.5, 5);
  bool differs = false;
  for (std::size_t i = 0; i < s.test.size(); ++i) differs = differs || other.test[i].score != s.test[i].score;
  CHECK(differs);
}

TEST_CASE("confidence histogram covers every row") {
  const auto rows = synthetic_rows(40, 30, 3);
  const auto h = confidence_histogram(rows, 7);
  REQUIRE(h.size() == 7);
  std::size_t b = 0, a = 0;
  for (const auto& bin : h) {
    b += bin.benign;
    a += bin.adv;
    CHECK(bin.hi > bin.lo);
  }
  CHECK(b == 40);
  CHECK(a == 30);
  for (std::size_t i = 1; i < h.size(); ++i) CHECK(h[i].lo == h[i - 1].hi);
}

TEST_CASE("report fields and recomputation") {
  const auto rows = synthetic_rows(40, 40, 9);
  const auto r = build_report(rows, std::nullopt, 0.5, 1, 10);
  for (const char* key : {"attack", "eps_a", "eps_v", "n_benign", "n_adv", "auc", "threshold", "f1_benign", "f1_adv",
                          "f1_avg", "mean_l2_v", "mean_linf_v", "mean_db_a", "success_rate"})
    CHECK(r.report.contains(key));
  const ScoreSplit s = split_scores(rows, 0.5, 1);
  const ThresholdChoice t = select_threshold(s.validation);
  const DetectionReport d = evaluate(s.test, t.threshold);
  CHECK(r.report.at("auc").get<double>() == d.auc);
  CHECK(r.report.at("threshold").get<double>() == t.threshold);
  CHECK(r.report.at("f1_avg").get<double>() == d.f1_avg);
  CHECK(r.report.at("n_benign").get<std::size_t>() == 20);
  CHECK(r.report.at("attack").get<std::string>() == "bim");

  auto mixed = rows;
  mixed.back().attack = "fgsm";
  CHECK_THROWS_AS(build_report(mixed, std::nullopt, 0.5, 1, 10), ConfigError);
}

TEST_CASE("tiny pipeline emits every artifact") {
  const fs::path& out = tiny_run();
  for (const char* f : {"config.json", "corpus/manifest.json", "models/word.ckpt", "models/sync.ckpt",
                        "attacks/bim/attacks.jsonl", "attacks/bim/manifest.json", "detect/bim/scores.csv",
                        "report/bim/report.json", "report/bim/roc.csv", "report/bim/hist.csv"})
    CHECK_MESSAGE(fs::exists(out / f), f);
  CHECK(slurp(out / "report/bim/roc.csv").rfind("fpr,tpr,threshold\n", 0) == 0);
  CHECK(read_attack_records(out / "attacks/bim/attacks.jsonl").size() == 12);
}

TEST_CASE("pipeline output is byte-identical for the same seed") {
  const fs::path again = fixtures::scratch("tiny_run_again");
  run_pipeline(tiny_config(), again);
  const auto a = tree(tiny_run()), b = tree(again);
  CHECK(a.size() == b.size());
  for (const auto& [name, bytes] : a) {
    CAPTURE(name);
    REQUIRE(b.count(name) == 1);
    CHECK(b.at(name) == bytes);
  }
}

TEST_CASE("report is recomputable and rerunning it is byte-identical") {
  const fs::path& run = tiny_run();
  const fs::path out = fixtures::scratch("rereport");
  const ExperimentConfig c = tiny_config();
  const auto seed = json::parse(slurp(run / "report/bim/report.json")).at("split_seed").get<std::uint64_t>();
  run_report(run / "detect/bim/scores.csv", run / "attacks/bim/attacks.jsonl", c.val_frac, seed, c.hist_bins, out);
  for (const char* f : {"report.json", "roc.csv", "hist.csv"}) CHECK(slurp(out / f) == slurp(run / "report/bim" / f));
}

TEST_CASE("cli exit codes and error lines") {
  const fs::path& run = tiny_run();
  const fs::path tmp = fixtures::scratch("cli");
  fs::create_directories(tmp);

  CHECK(cli("default-config").code == 0);
  CHECK(cli("").code == 2);
  CHECK(cli("attack --method nope --model x --corpus y --out z").code == 2);

  const auto missing = cli("gen-data --config " + (tmp / "absent.json").string() + " --out " + (tmp / "c").string());
  CHECK(missing.code == 3);
  const json line = json::parse(missing.err);
  CHECK(line.at("exit_code") == 3);
  CHECK(line.at("error") == "io");
  CHECK(missing.err.find('\n') == missing.err.size() - 1);

  spit(tmp / "bad.json", "{\"schema_version\": 1, \"seed\": [");
  CHECK(cli("gen-data --config " + (tmp / "bad.json").string() + " --out " + (tmp / "c").string()).code == 2);

  spit(tmp / "bad.csv", "clip_id,kind,attack,offset,confidence\nx,benign,none,zero,1\n");
  CHECK(cli("report --scores " + (tmp / "bad.csv").string() + " --out " + (tmp / "r").string()).code == 5);

  CHECK(cli("report --scores " + (run / "detect/bim/scores.csv").string() + " --out " + (tmp / "r").string() +
            " --seed 3")
            .code == 0);

  // A sentence corpus and model for the targeted attack.
  const auto& s = fixtures::seq();
  const fs::path seq_ckpt = tmp / "seq.ckpt";
  save_model(seq_ckpt, s.model);
  std::string long_target;
  for (int i = 0; i < 80; ++i) long_target += "1 ";
  const auto infeasible = cli("attack --method targeted --model " + seq_ckpt.string() + " --corpus " +
                              s.corpus.root.string() + " --target \"" + long_target + "\" --out " + (tmp / "t").string());
  CHECK(infeasible.code == 4);
  CHECK(json::parse(infeasible.err).at("error") == "infeasible_target");
  CHECK(cli("attack --method targeted --model " + seq_ckpt.string() + " --corpus " + s.corpus.root.string() +
            " --target \"1 x\" --out " + (tmp / "t").string())
            .code == 2);
  CHECK(cli("attack --method bim --model " + seq_ckpt.string() + " --corpus " + s.corpus.root.string() + " --out " +
            (tmp / "t").string())
            .code == 2);
}

TEST_CASE("targeted attack emits one record per clip and target") {
  const auto& s = fixtures::seq();
  const fs::path tmp = fixtures::scratch("targets");
  fs::create_directories(tmp);
  save_model(tmp / "seq.ckpt", s.model);
  AttackSpec spec;
  spec.method = AttackMethod::targeted;
  spec.targets = {{1, 2, 3}, {4, 5}, {6}};
  spec.config.max_iterations = 2;
  const auto records = run_attack(spec, tmp / "seq.ckpt", s.corpus.root, tmp / "out");
  CHECK(records.size() == 3 * s.test.size());
  CHECK(read_attack_records(tmp / "out/attacks.jsonl") == records);
  CHECK(records[1].clip_id == s.test[1].id + "-t0");
  CHECK(records[s.test.size()].clip_id == s.test[0].id + "-t1");
}
