#pragma once

#include <span>
#include <string>
#include <vector>

#include "charmt/model.hpp"
#include "charmt/text.hpp"
#include "json.hpp"

namespace charmt {

enum class DecodeStrategy { kGreedy, kBeam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  int beam_size = 4;
  /// Output cap: max_len_ratio * source characters + max_len_offset tokens
  /// (EOS included), never beyond the model's max_len.
  double max_len_ratio = 3.0;
  int max_len_offset = 10;
  /// Hypotheses are ranked by logP / length^length_penalty.
  double length_penalty = 1.0;

  void validate() const;
  bool operator==(const DecodeConfig&) const = default;
};

nlohmann::json to_json(const DecodeConfig& config);
/// With `sink` given, problems are appended to it and the partially read
/// config is returned instead of throwing.
DecodeConfig decode_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink = nullptr);

struct Hypothesis {
  std::string text;
  /// Generated ids, EOS included when the hypothesis finished.
  std::vector<std::int32_t> ids;
  double log_prob = 0.0;
  /// Last-layer cross attention, head mean, one row per generated token.
  AttentionMap attention;
};

/// Number of tokens a source of `source_chars` characters may generate.
std::size_t output_cap(std::size_t source_chars, const DecodeConfig& config, const Model& model);

/// Log-softmax over one logit row with PAD and BOS excluded (-inf).
std::vector<double> generation_log_probs(std::span<const double> logits);

/// Argmax per step, lowest id on ties; stops at EOS or the cap.
Hypothesis greedy_decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                         const DecodeConfig& config = {});
/// Same as greedy_decode row by row, computed in one batch.
std::vector<Hypothesis> greedy_decode_batch(const Model& model, std::span<const std::string> sources,
                                            const Vocabulary& vocab, const DecodeConfig& config = {});

/// Length-normalized beam search; beam_size 1 reproduces greedy_decode.
Hypothesis beam_decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                       const DecodeConfig& config);

/// Dispatches on config.strategy.
Hypothesis decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                  const DecodeConfig& config);

}  // namespace charmt
