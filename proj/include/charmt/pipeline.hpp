#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "charmt/run_config.hpp"

namespace charmt {

struct PreparedData {
  Vocabulary vocab;
  /// Transliterated and mixed training stream.
  ParallelCorpus train;
  std::vector<ValidationSet> valid;
  /// Raw transliteration table text, carried into checkpoints.
  std::string translit_tsv;
};

/// Loads every corpus, latinizes sources when a table is configured, mixes
/// the training corpora with a seed derived from train.seed, and loads or
/// builds the vocabulary.
PreparedData prepare_data(const RunConfig& config);

/// The configuration with model.vocab_size taken from the vocabulary.
RunConfig resolve_config(RunConfig config, const Vocabulary& vocab);

struct TrainOutcome {
  RunConfig resolved;
  TrainLog log;
  int best_epoch = 0;
  double best_bleu = 0.0;
  std::filesystem::path latest;
  std::filesystem::path best;
};

/// Trains and writes into out_dir: config.json (resolved), vocab.txt,
/// latest.ckpt, best.ckpt (highest pooled validation BLEU), train_log.csv
/// and epochs.csv. With resume set and latest.ckpt present, continues from
/// it. Progress lines go to `progress` when given.
TrainOutcome train_run(const RunConfig& config, const std::filesystem::path& out_dir, bool resume = false,
                       std::ostream* progress = nullptr);

/// Model, vocabulary and source preprocessing restored from a checkpoint.
struct LoadedModel {
  Checkpoint checkpoint;
  Model model;
  std::optional<TransliterationTable> translit;

  explicit LoadedModel(const std::filesystem::path& path);
  /// Applies the training-time transliteration to a source line.
  std::string prepare_source(const std::string& line) const;
  /// Characters of prepared lines outside the vocabulary.
  std::size_t unknown_characters(std::span<const std::string> lines) const;
};

/// Line-by-line translation; greedy lines are decoded in batches.
std::vector<Hypothesis> translate_lines(const Model& model, const Vocabulary& vocab,
                                        std::span<const std::string> sources, const DecodeConfig& config,
                                        std::size_t batch = 64);

/// Header plus per-epoch rows (pooled and per-set validation columns).
std::string epochs_csv(const TrainLog& log);

}  // namespace charmt
