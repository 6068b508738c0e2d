#include "charmt/bleu.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "charmt/text.hpp"

namespace charmt {

std::string to_string(BleuTokenizer t) { return t == BleuTokenizer::kCharacter ? "char" : "whitespace"; }

BleuTokenizer bleu_tokenizer_from_string(const std::string& name) {
  if (name == "whitespace") return BleuTokenizer::kWhitespace;
  if (name == "char") return BleuTokenizer::kCharacter;
  throw std::invalid_argument("unknown BLEU tokenizer '" + name + "' (expected whitespace or char)");
}

namespace {

bool is_space(char32_t c) { return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f'; }

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NGramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

std::vector<std::string> bleu_tokens(const std::string& text, BleuTokenizer tokenizer) {
  std::vector<std::string> tokens;
  std::string current;
  for (char32_t c : utf8_decode(text)) {
    if (is_space(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else if (tokenizer == BleuTokenizer::kCharacter) {
      tokens.push_back(utf8_encode(c));
    } else {
      current += utf8_encode(c);
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

BleuStats bleu_stats(std::span<const std::string> hypotheses, std::span<const std::string> references,
                     const BleuOptions& options) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("BLEU: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                                std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw std::invalid_argument("BLEU: empty corpus");
  if (options.max_order < 1) throw std::invalid_argument("BLEU: max_order must be >= 1");
  const auto N = static_cast<std::size_t>(options.max_order);
  BleuStats s;
  s.matches.assign(N, 0);
  s.totals.assign(N, 0);
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = bleu_tokens(hypotheses[i], options.tokenizer);
    const auto ref = bleu_tokens(references[i], options.tokenizer);
    s.hyp_length += hyp.size();
    s.ref_length += ref.size();
    for (std::size_t n = 1; n <= N; ++n) {
      const NGramCounts h = count_ngrams(hyp, n);
      const NGramCounts r = count_ngrams(ref, n);
      for (const auto& [gram, count] : h) {
        s.totals[n - 1] += count;
        auto it = r.find(gram);
        if (it != r.end()) s.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& s, const BleuOptions& options) {
  if (s.hyp_length == 0) return s.ref_length == 0 ? 100.0 : 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 0; n < s.totals.size(); ++n) {
    double num = static_cast<double>(s.matches[n]);
    double den = static_cast<double>(s.totals[n]);
    if (options.smoothing && n > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (den == 0.0) continue;
    if (num == 0.0) return 0.0;
    log_sum += std::log(num / den);
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double c = static_cast<double>(s.hyp_length);
  const double r = static_cast<double>(s.ref_length);
  const double log_bp = c >= r ? 0.0 : 1.0 - r / c;
  return 100.0 * std::exp(log_bp + log_sum / orders);
}

double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references,
                   const BleuOptions& options) {
  return bleu_from_stats(bleu_stats(hypotheses, references, options), options);
}

std::string format_bleu(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "BLEU %.2f", score);
  return buf;
}

}  // namespace charmt
