#pragma once

#include <span>
#include <string>
#include <vector>

namespace charmt {

enum class BleuTokenizer { kWhitespace, kCharacter };

std::string to_string(BleuTokenizer t);
BleuTokenizer bleu_tokenizer_from_string(const std::string& name);

struct BleuOptions {
  BleuTokenizer tokenizer = BleuTokenizer::kWhitespace;
  int max_order = 4;
  /// Add-one smoothing of the n > 1 precisions, for tiny corpora.
  bool smoothing = false;
};

struct BleuStats {
  std::vector<std::size_t> matches;  // clipped n-gram matches per order
  std::vector<std::size_t> totals;   // hypothesis n-grams per order
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

/// Whitespace tokens, or code points with whitespace removed.
std::vector<std::string> bleu_tokens(const std::string& text, BleuTokenizer tokenizer);

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references,
                     const BleuOptions& options = {});

/// Corpus BLEU in [0, 100]. Orders with no hypothesis n-grams anywhere in the
/// corpus are left out of the geometric mean; an order with n-grams but no
/// match gives 0 unless smoothing is on.
double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references,
                   const BleuOptions& options = {});
double bleu_from_stats(const BleuStats& stats, const BleuOptions& options = {});

/// "BLEU 12.34"
std::string format_bleu(double score);

}  // namespace charmt
