#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "charmt/model.hpp"
#include "charmt/text.hpp"

namespace charmt {

struct AlignmentSample {
  /// Index of the sentence in the corpus it was drawn from.
  std::size_t id = 0;
  AttentionMap matrix;
};

struct AlignmentSet {
  std::string model_tag;
  std::string language;
  std::vector<AlignmentSample> samples;  // ascending id
};

/// Draws n pairs uniformly without replacement (seeded) and stores the
/// teacher-forced, head-averaged last-layer cross attention of each. Runs
/// `threads` workers (0 picks the hardware count); the result does not
/// depend on the thread count.
AlignmentSet collect_alignments(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                                std::size_t n, std::uint64_t seed, std::string model_tag = "",
                                unsigned threads = 0);

struct Grid {
  std::size_t out = 32;
  std::size_t in = 32;
  bool operator==(const Grid&) const = default;
};

/// Bilinear resize (half-pixel centers, edges clamped) of a T_out x T_in
/// matrix onto the grid, flattened row-major and rescaled to total mass
/// grid.out.
std::vector<double> project_to_grid(const AttentionMap& matrix, Grid grid = {});

struct CcaReport {
  std::string model_a;
  std::string model_b;
  std::string language;
  std::size_t n = 0;
  Grid grid;
  std::size_t k = 0;
  /// Top-k canonical correlations, descending, clipped to [0, 1].
  std::vector<double> correlations;
  double rho_mean = 0.0;
};

/// Regularized CCA between the rows of X and Y (samples x features,
/// row-major). Directions come from the SVD of the whitened
/// cross-covariance; each reported correlation is the sample correlation
/// of the paired canonical variates.
CcaReport cca_mean_correlation(const std::vector<double>& X, const std::vector<double>& Y, std::size_t samples,
                               std::size_t features, std::size_t k = 10, double reg = 1e-4);

/// Paired CCA of two alignment sets over the same sentence ids.
CcaReport alignment_report(const AlignmentSet& a, const AlignmentSet& b, Grid grid = {}, std::size_t k = 10,
                           double reg = 1e-4);

inline constexpr const char* kCcaCsvHeader = "model_a,model_b,test_lang,n,grid,k,rho_mean";
std::string cca_csv_row(const CcaReport& report);
void write_cca_csv(const std::filesystem::path& path, const std::vector<CcaReport>& reports);

/// "T_out T_in" then one line of T_in values per output position.
std::string format_attention_matrix(const AttentionMap& matrix);
void write_attention_matrix(const std::filesystem::path& path, const AttentionMap& matrix);
AttentionMap read_attention_matrix(const std::filesystem::path& path);
/// One file per sample, named <prefix><id>.txt.
void dump_alignments(const AlignmentSet& set, const std::filesystem::path& dir, const std::string& prefix = "sent_");

}  // namespace charmt
