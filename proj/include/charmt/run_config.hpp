#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "charmt/alignment.hpp"
#include "charmt/decode.hpp"
#include "charmt/model.hpp"
#include "charmt/training.hpp"
#include "json.hpp"

namespace charmt {

struct CorpusFiles {
  std::string language;
  std::filesystem::path source;
  std::filesystem::path target;
  bool operator==(const CorpusFiles&) const = default;
};

struct DataConfig {
  /// Bilingual training corpora, mixed into one stream without language ids.
  std::vector<CorpusFiles> train;
  /// One validation set per entry, scored separately and pooled.
  std::vector<CorpusFiles> valid;
  /// Existing vocabulary file; empty builds one from the training corpora.
  std::filesystem::path vocab;
  /// Optional TSV table latinizing source characters.
  std::filesystem::path translit;
  std::string translit_separator = "|";
  std::size_t min_count = 1;
  bool operator==(const DataConfig&) const = default;
};

struct AnalyzeConfig {
  std::size_t n = 500;
  Grid grid;
  std::size_t k = 10;
  double reg = 1e-4;
  std::uint64_t seed = 1;
  bool operator==(const AnalyzeConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  DecodeConfig eval;
  AnalyzeConfig analyze;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);
/// Strict: unknown keys and type errors in any section are collected and
/// reported together. Relative data paths are resolved against base_dir.
/// model.vocab_size may be 0 (filled in from the vocabulary at training).
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace charmt
