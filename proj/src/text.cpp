#include "charmt/text.hpp"

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "charmt/rng.hpp"

namespace charmt {

// ---- UTF-8 ---------------------------------------------------------------

std::u32string utf8_decode(std::string_view text) {
  std::u32string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t extra = 0;
    char32_t cp = 0;
    if (lead < 0x80) {
      cp = lead;
    } else if ((lead & 0xE0) == 0xC0) {
      cp = lead & 0x1F;
      extra = 1;
    } else if ((lead & 0xF0) == 0xE0) {
      cp = lead & 0x0F;
      extra = 2;
    } else if ((lead & 0xF8) == 0xF0) {
      cp = lead & 0x07;
      extra = 3;
    } else {
      throw std::invalid_argument("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    for (std::size_t k = 1; k <= extra; ++k) {
      if (i + k >= text.size()) throw std::invalid_argument("truncated UTF-8 sequence at offset " + std::to_string(i));
      const auto cont = static_cast<unsigned char>(text[i + k]);
      if ((cont & 0xC0) != 0x80) {
        throw std::invalid_argument("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      }
      cp = (cp << 6) | (cont & 0x3F);
    }
    static constexpr char32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw std::invalid_argument("invalid UTF-8 code point at offset " + std::to_string(i));
    }
    out.push_back(cp);
    i += extra + 1;
  }
  return out;
}

std::string utf8_encode(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
  return out;
}

std::string utf8_encode(std::u32string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) out += utf8_encode(c);
  return out;
}

std::string nfc_normalize(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFC normalizer unavailable");
  const icu::UnicodeString input =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  const icu::UnicodeString normalized = nfc->normalize(input, status);
  if (U_FAILURE(status)) throw std::runtime_error("NFC normalization failed");
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

// ---- Vocabulary ----------------------------------------------------------

Vocabulary::Vocabulary(std::vector<char32_t> characters) : chars_(std::move(characters)) {
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    if (!ids_.emplace(chars_[i], kReserved + static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary character '" + utf8_encode(chars_[i]) + "'");
    }
  }
}

std::int32_t Vocabulary::id_of(char32_t c) const {
  auto it = ids_.find(c);
  return it == ids_.end() ? kUnk : it->second;
}

char32_t Vocabulary::char_of(std::int32_t id) const {
  if (id < kReserved || static_cast<std::size_t>(id) >= size()) {
    throw std::out_of_range("no character for id " + std::to_string(id));
  }
  return chars_[static_cast<std::size_t>(id - kReserved)];
}

std::vector<std::int32_t> Vocabulary::encode(std::string_view text, bool add_bos_eos) const {
  const std::u32string chars = utf8_decode(text);
  std::vector<std::int32_t> ids;
  ids.reserve(chars.size() + 2);
  if (add_bos_eos) ids.push_back(kBos);
  for (char32_t c : chars) ids.push_back(id_of(c));
  if (add_bos_eos) ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::u32string out;
  for (std::int32_t id : ids) {
    if (id < kReserved || static_cast<std::size_t>(id) >= size()) continue;
    out.push_back(chars_[static_cast<std::size_t>(id - kReserved)]);
  }
  return utf8_encode(out);
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (char32_t c : chars_) {
    out += utf8_encode(c);
    out.push_back('\n');
  }
  return out;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  std::vector<char32_t> chars;
  std::size_t start = 0;
  std::size_t line = 1;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::u32string entry = utf8_decode(text.substr(start, end - start));
    if (entry.size() != 1) {
      throw std::invalid_argument("vocabulary line " + std::to_string(line) + " must hold exactly one character");
    }
    chars.push_back(entry[0]);
    start = end + 1;
    ++line;
  }
  return Vocabulary(std::move(chars));
}

namespace {
std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}
}  // namespace

void Vocabulary::save(const std::filesystem::path& path) const { write_file(path, to_text()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_text(read_file(path)); }

// ---- Transliteration -----------------------------------------------------

void TransliterationTable::add(char32_t c, std::string latin) {
  if (latin.empty()) throw std::invalid_argument("empty transliteration code for '" + utf8_encode(c) + "'");
  for (unsigned char ch : latin) {
    if (ch >= 0x80 || ch < 0x20) {
      throw std::invalid_argument("transliteration code '" + latin + "' is not printable ASCII");
    }
  }
  if (!codes_.emplace(c, std::move(latin)).second) {
    throw std::invalid_argument("duplicate transliteration entry for '" + utf8_encode(c) + "'");
  }
}

std::string TransliterationTable::apply(std::string_view text) const {
  std::string out;
  for (char32_t c : utf8_decode(text)) {
    auto it = codes_.find(c);
    if (it == codes_.end()) {
      out += utf8_encode(c);
    } else {
      out += it->second;
      out += separator_;
    }
  }
  return out;
}

TransliterationTable TransliterationTable::from_tsv(std::string_view text, std::string separator) {
  TransliterationTable table(std::move(separator));
  std::size_t start = 0;
  std::size_t line = 1;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view row = text.substr(start, end - start);
    if (!row.empty()) {
      const std::size_t tab = row.find('\t');
      if (tab == std::string_view::npos) {
        throw std::invalid_argument("transliteration line " + std::to_string(line) + ": expected char<TAB>latin");
      }
      const std::u32string key = utf8_decode(row.substr(0, tab));
      if (key.size() != 1) {
        throw std::invalid_argument("transliteration line " + std::to_string(line) +
                                    ": first field must be one character");
      }
      try {
        table.add(key[0], std::string(row.substr(tab + 1)));
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("transliteration line " + std::to_string(line) + ": " + e.what());
      }
    }
    start = end + 1;
    ++line;
  }
  return table;
}

TransliterationTable TransliterationTable::load_tsv(const std::filesystem::path& path, std::string separator) {
  return from_tsv(read_file(path), std::move(separator));
}

std::string transliterate(std::string_view text, const TransliterationTable& table) { return table.apply(text); }

// ---- Parallel corpora ----------------------------------------------------

ParallelCorpus make_corpus(std::vector<std::pair<std::string, std::string>> pairs, std::string language) {
  ParallelCorpus corpus;
  corpus.language = std::move(language);
  corpus.pairs.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first.empty() || pairs[i].second.empty()) {
      throw std::invalid_argument("empty sentence in pair " + std::to_string(i + 1));
    }
    corpus.pairs.push_back({std::move(pairs[i].first), std::move(pairs[i].second), i + 1});
  }
  return corpus;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("file not found: " + path.string());
  const std::string content = read_file(path);
  if (content.size() >= 3 && content.compare(0, 3, "\xEF\xBB\xBF") == 0) {
    throw std::runtime_error(path.string() + ": byte-order mark not allowed");
  }
  if (content.find('\r') != std::string::npos) {
    throw std::runtime_error(path.string() + ": CR line endings not allowed");
  }
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    const std::string_view raw(content.data() + start, end - start);
    try {
      utf8_decode(raw);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lines.size() + 1) + ": " + e.what());
    }
    lines.push_back(nfc_normalize(raw));
    start = end + 1;
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::string content;
  for (const auto& l : lines) {
    content += l;
    content.push_back('\n');
  }
  write_file(path, content);
}

ParallelCorpus load_parallel_corpus(const std::filesystem::path& source, const std::filesystem::path& target,
                                    std::string language) {
  std::vector<std::string> src = read_lines(source);
  std::vector<std::string> tgt = read_lines(target);
  if (src.size() != tgt.size()) {
    throw std::runtime_error("line count mismatch: " + source.string() + " has " + std::to_string(src.size()) +
                             ", " + target.string() + " has " + std::to_string(tgt.size()));
  }
  ParallelCorpus corpus;
  corpus.language = std::move(language);
  corpus.pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) {
      throw std::runtime_error("empty line " + std::to_string(i + 1) + " in " +
                               (src[i].empty() ? source.string() : target.string()));
    }
    corpus.pairs.push_back({std::move(src[i]), std::move(tgt[i]), i + 1});
  }
  return corpus;
}

ParallelCorpus transliterate_sources(const ParallelCorpus& corpus, const TransliterationTable& table) {
  ParallelCorpus out = corpus;
  for (auto& p : out.pairs) p.source = table.apply(p.source);
  return out;
}

ParallelCorpus mix_corpora(std::span<const ParallelCorpus> corpora, std::uint64_t seed) {
  if (corpora.empty()) throw std::invalid_argument("mix_corpora: no corpora");
  ParallelCorpus mixed;
  for (const auto& c : corpora) {
    if (!mixed.language.empty() && !c.language.empty()) mixed.language += "+";
    mixed.language += c.language;
    mixed.pairs.insert(mixed.pairs.end(), c.pairs.begin(), c.pairs.end());
  }
  Rng rng(seed);
  rng.shuffle(std::span<SentencePair>(mixed.pairs));
  return mixed;
}

Vocabulary build_vocab(std::span<const ParallelCorpus> corpora, std::size_t min_count) {
  if (min_count < 1) throw std::invalid_argument("build_vocab: min_count must be >= 1");
  std::map<char32_t, std::size_t> counts;
  std::size_t pairs = 0;
  for (const auto& corpus : corpora) {
    for (const auto& p : corpus.pairs) {
      ++pairs;
      for (char32_t c : utf8_decode(p.source)) ++counts[c];
      for (char32_t c : utf8_decode(p.target)) ++counts[c];
    }
  }
  if (pairs == 0) throw std::invalid_argument("build_vocab: corpora are empty");
  std::vector<char32_t> chars;
  for (const auto& [c, n] : counts) {
    if (n >= min_count) chars.push_back(c);
  }
  return Vocabulary(std::move(chars));
}

// ---- Batches -------------------------------------------------------------

std::size_t Batch::src_tokens() const { return std::accumulate(src_lengths.begin(), src_lengths.end(), std::size_t{0}); }

std::size_t Batch::tgt_tokens() const { return std::accumulate(tgt_lengths.begin(), tgt_lengths.end(), std::size_t{0}); }

EncodedPair encode_pair(std::string_view source, std::string_view target, const Vocabulary& vocab) {
  EncodedPair p;
  p.source = vocab.encode(source, false);
  p.source.push_back(Vocabulary::kEos);
  p.target = vocab.encode(target, false);
  return p;
}

Batch assemble_batch(std::span<const EncodedPair> pairs, std::span<const std::size_t> pair_index) {
  if (pairs.empty()) throw std::invalid_argument("assemble_batch: no pairs");
  Batch b;
  b.batch_size = pairs.size();
  for (const auto& p : pairs) {
    b.src_len = std::max(b.src_len, p.source.size());
    b.tgt_len = std::max(b.tgt_len, p.target.size() + 1);
  }
  const std::size_t B = b.batch_size;
  b.src_ids.assign(B * b.src_len, Vocabulary::kPad);
  b.src_mask.assign(B * b.src_len, 0);
  b.tgt_in_ids.assign(B * b.tgt_len, Vocabulary::kPad);
  b.tgt_out_ids.assign(B * b.tgt_len, Vocabulary::kPad);
  b.tgt_mask.assign(B * b.tgt_len, 0);
  for (std::size_t r = 0; r < B; ++r) {
    const auto& p = pairs[r];
    for (std::size_t t = 0; t < p.source.size(); ++t) {
      b.src_ids[r * b.src_len + t] = p.source[t];
      b.src_mask[r * b.src_len + t] = 1;
    }
    const std::size_t n = p.target.size() + 1;
    for (std::size_t t = 0; t < n; ++t) {
      b.tgt_in_ids[r * b.tgt_len + t] = t == 0 ? Vocabulary::kBos : p.target[t - 1];
      b.tgt_out_ids[r * b.tgt_len + t] = t + 1 == n ? Vocabulary::kEos : p.target[t];
      b.tgt_mask[r * b.tgt_len + t] = 1;
    }
    b.src_lengths.push_back(p.source.size());
    b.tgt_lengths.push_back(n);
    b.pair_index.push_back(pair_index.empty() ? r : pair_index[r]);
  }
  return b;
}

Batch make_batch(std::span<const std::string> sources, std::span<const std::string> targets,
                 const Vocabulary& vocab) {
  if (!targets.empty() && targets.size() != sources.size()) {
    throw std::invalid_argument("make_batch: source/target count mismatch");
  }
  std::vector<EncodedPair> encoded;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    encoded.push_back(encode_pair(sources[i], targets.empty() ? std::string_view{} : targets[i], vocab));
  }
  return assemble_batch(encoded);
}

std::vector<Batch> make_batches(const ParallelCorpus& corpus, const Vocabulary& vocab, std::size_t max_tokens,
                                std::uint64_t seed) {
  const std::size_t n = corpus.size();
  std::vector<EncodedPair> encoded(n);
  std::vector<std::size_t> cost(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = corpus.pairs[i];
    encoded[i] = encode_pair(p.source, p.target, vocab);
    cost[i] = std::max(encoded[i].source.size(), encoded[i].target.size() + 1);
    if (cost[i] > max_tokens) {
      throw std::invalid_argument("sentence pair at line " + std::to_string(p.line) + " needs " +
                                  std::to_string(cost[i]) + " tokens, exceeding max_tokens " +
                                  std::to_string(max_tokens));
    }
  }

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return encoded[a].source.size() < encoded[b].source.size();
  });

  std::vector<Batch> batches;
  std::vector<EncodedPair> current;
  std::vector<std::size_t> current_index;
  std::size_t widest = 0;
  auto flush = [&] {
    if (current.empty()) return;
    batches.push_back(assemble_batch(current, current_index));
    current.clear();
    current_index.clear();
    widest = 0;
  };
  for (std::size_t i : order) {
    const std::size_t w = std::max(widest, cost[i]);
    if (!current.empty() && (current.size() + 1) * w > max_tokens) flush();
    widest = std::max(widest, cost[i]);
    current.push_back(encoded[i]);
    current_index.push_back(i);
  }
  flush();
  rng.shuffle(std::span<Batch>(batches));
  return batches;
}

}  // namespace charmt
