#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace charmt {

// ---- UTF-8 ---------------------------------------------------------------

/// Throws std::invalid_argument on malformed input.
std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);
std::string utf8_encode(char32_t c);
/// Unicode NFC normalization (ICU).
std::string nfc_normalize(std::string_view text);

// ---- Vocabulary ----------------------------------------------------------

/// Character <-> id map. Ids 0..3 are PAD, BOS, EOS, UNK; characters follow
/// from id 4 in the order given at construction.
class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::int32_t kReserved = 4;

  Vocabulary() = default;
  /// Throws std::invalid_argument on duplicate characters.
  explicit Vocabulary(std::vector<char32_t> characters);

  std::size_t size() const { return kReserved + chars_.size(); }
  const std::vector<char32_t>& characters() const { return chars_; }

  bool contains(char32_t c) const { return ids_.count(c) != 0; }
  /// UNK for characters outside the vocabulary.
  std::int32_t id_of(char32_t c) const;
  /// Throws std::out_of_range for reserved or unknown ids.
  char32_t char_of(std::int32_t id) const;
  static bool is_reserved(std::int32_t id) { return id >= 0 && id < kReserved; }

  std::vector<std::int32_t> encode(std::string_view text, bool add_bos_eos) const;
  /// Reserved ids are dropped from the output.
  std::string decode(std::span<const std::int32_t> ids) const;

  /// One character per line, first line is id 4.
  std::string to_text() const;
  static Vocabulary from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return chars_ == other.chars_; }

 private:
  std::vector<char32_t> chars_;
  std::map<char32_t, std::int32_t> ids_;
};

// ---- Transliteration -----------------------------------------------------

/// Per-character latinization. Mapped characters become their latin code
/// followed by the separator; everything else passes through.
class TransliterationTable {
 public:
  explicit TransliterationTable(std::string separator = "|") : separator_(std::move(separator)) {}

  /// Throws std::invalid_argument for duplicates or a non-ASCII/empty code.
  void add(char32_t c, std::string latin);
  std::size_t size() const { return codes_.size(); }
  const std::string& separator() const { return separator_; }

  std::string apply(std::string_view text) const;

  /// "char<TAB>latin" rows; duplicate characters are an error.
  static TransliterationTable from_tsv(std::string_view text, std::string separator = "|");
  static TransliterationTable load_tsv(const std::filesystem::path& path, std::string separator = "|");

 private:
  std::string separator_;
  std::map<char32_t, std::string> codes_;
};

std::string transliterate(std::string_view text, const TransliterationTable& table);

// ---- Parallel corpora ----------------------------------------------------

struct SentencePair {
  std::string source;
  std::string target;
  /// 1-based line number in the originating files.
  std::size_t line = 0;

  bool operator==(const SentencePair&) const = default;
};

/// Aligned sentence pairs. The language tag is bookkeeping only and never
/// reaches the model.
struct ParallelCorpus {
  std::string language;
  std::vector<SentencePair> pairs;

  std::size_t size() const { return pairs.size(); }
};

/// Builds a corpus from in-memory pairs; rejects empty sides.
ParallelCorpus make_corpus(std::vector<std::pair<std::string, std::string>> pairs, std::string language = "");

/// Two aligned UTF-8 files (LF, no BOM). Lines are NFC-normalized.
ParallelCorpus load_parallel_corpus(const std::filesystem::path& source, const std::filesystem::path& target,
                                    std::string language = "");

/// Reads a UTF-8 one-sentence-per-line file (LF, no BOM), NFC-normalized.
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);

ParallelCorpus transliterate_sources(const ParallelCorpus& corpus, const TransliterationTable& table);

/// Concatenation followed by a seeded uniform shuffle.
ParallelCorpus mix_corpora(std::span<const ParallelCorpus> corpora, std::uint64_t seed);

/// Characters seen at least min_count times on either side, sorted by code
/// point after the reserved block.
Vocabulary build_vocab(std::span<const ParallelCorpus> corpora, std::size_t min_count = 1);

// ---- Batches -------------------------------------------------------------

/// Row-major padded id matrices. Sources end with EOS; tgt_in is BOS + target
/// and tgt_out is target + EOS. Masks hold 1 at real positions.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<std::int32_t> src_ids;
  std::vector<std::int32_t> tgt_in_ids;
  std::vector<std::int32_t> tgt_out_ids;
  std::vector<std::uint8_t> src_mask;
  std::vector<std::uint8_t> tgt_mask;
  std::vector<std::size_t> src_lengths;
  std::vector<std::size_t> tgt_lengths;
  /// Index of each row in the corpus it was drawn from.
  std::vector<std::size_t> pair_index;

  std::size_t src_tokens() const;
  std::size_t tgt_tokens() const;
};

/// Encoded source (with EOS) and bare target ids.
struct EncodedPair {
  std::vector<std::int32_t> source;
  std::vector<std::int32_t> target;
};

EncodedPair encode_pair(std::string_view source, std::string_view target, const Vocabulary& vocab);

/// Pads a list of encoded pairs into one batch.
Batch assemble_batch(std::span<const EncodedPair> pairs, std::span<const std::size_t> pair_index = {});

/// Convenience for in-memory strings. An empty target gives tgt_out = [EOS].
Batch make_batch(std::span<const std::string> sources, std::span<const std::string> targets,
                 const Vocabulary& vocab);

/// Length-bucketed batches with batch_size * max(src_len, tgt_len) <=
/// max_tokens, in seeded order. Every pair appears exactly once.
std::vector<Batch> make_batches(const ParallelCorpus& corpus, const Vocabulary& vocab, std::size_t max_tokens,
                                std::uint64_t seed);

}  // namespace charmt
