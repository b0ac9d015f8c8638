#pragma once

// Lazily built corpora and trained models shared by several test files.

#include <filesystem>
#include <string>
#include <unistd.h>

#include "avsync/avdata.hpp"
#include "avsync/models.hpp"
#include "avsync/training.hpp"

namespace fixtures {

namespace fs = std::filesystem;

// Fresh per-process scratch directory, removed at exit.
inline const fs::path& scratch_root() {
  struct Dir {
    fs::path path;
    Dir() : path(fs::temp_directory_path() / ("avsync_tests_" + std::to_string(::getpid()))) {
      fs::remove_all(path);
      fs::create_directories(path);
    }
    ~Dir() {
      std::error_code ec;
      fs::remove_all(path, ec);
    }
  };
  static Dir dir;
  return dir.path;
}

inline fs::path scratch(const std::string& name) {
  const fs::path p = scratch_root() / name;
  fs::remove_all(p);
  return p;
}

struct WordSetup {
  avsync::CorpusManifest corpus;
  avsync::WordModel model;
  std::vector<avsync::LabeledClip> test;
  avsync::TrainHistory history;
};

// Default word corpus (60/20/20) and a word model trained with default settings.
inline const WordSetup& word() {
  static const WordSetup setup = [] {
    const auto cc = avsync::default_corpus_config(avsync::Task::word);
    auto corpus = avsync::make_corpus(cc, scratch_root() / "word_corpus");
    avsync::WordModel model(avsync::recognizer_config_for(cc.gen));
    const auto history = avsync::train_word(model, corpus, avsync::TrainConfig{});
    auto test = avsync::load_split(corpus, avsync::Split::test);
    return WordSetup{std::move(corpus), std::move(model), std::move(test), history};
  }();
  return setup;
}

struct SeqSetup {
  avsync::CorpusManifest corpus;
  avsync::SeqModel model;
  std::vector<avsync::LabeledClip> test;
  avsync::TrainHistory history;
};

// Default sentence corpus (60/20/20) and a seq model trained for 50 epochs.
inline const SeqSetup& seq() {
  static const SeqSetup setup = [] {
    const auto cc = avsync::default_corpus_config(avsync::Task::seq);
    auto corpus = avsync::make_corpus(cc, scratch_root() / "seq_corpus");
    avsync::SeqModel model(avsync::recognizer_config_for(cc.gen));
    avsync::TrainConfig tc;
    tc.learning_rate = 0.02;
    tc.epochs = 50;
    const auto history = avsync::train_seq(model, corpus, tc);
    auto test = avsync::load_split(corpus, avsync::Split::test);
    return SeqSetup{std::move(corpus), std::move(model), std::move(test), history};
  }();
  return setup;
}

}  // namespace fixtures
