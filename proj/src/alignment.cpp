#include "charmt/alignment.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <mutex>
#include <thread>

namespace charmt {

AlignmentSet collect_alignments(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                                std::size_t n, std::uint64_t seed, std::string model_tag, unsigned threads) {
  if (corpus.size() == 0) throw std::invalid_argument("collect_alignments: no sentences");
  if (n == 0 || n > corpus.size()) {
    throw std::invalid_argument("collect_alignments: sample size " + std::to_string(n) + " not in [1, " +
                                std::to_string(corpus.size()) + "]");
  }
  std::vector<std::size_t> ids(corpus.size());
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(ids));
  ids.resize(n);
  std::sort(ids.begin(), ids.end());

  AlignmentSet set;
  set.model_tag = std::move(model_tag);
  set.language = corpus.language;
  set.samples.resize(n);
  // Validate encodings up front so workers only see well-formed input.
  for (std::size_t id : ids) {
    vocab.encode(corpus.pairs[id].source, true);
    vocab.encode(corpus.pairs[id].target, true);
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const SentencePair& p = corpus.pairs[ids[i]];
      const std::vector<std::string> src{p.source}, tgt{p.target};
      const Batch batch = make_batch(src, tgt, vocab);
      set.samples[i] = {ids[i], extract_cross_attention(model, batch).front()};
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      try {
        work();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return set;
}

namespace {

// Source position of output cell i with half-pixel centers, clamped to the
// first and last source cell.
double source_coord(std::size_t i, std::size_t count, std::size_t extent) {
  const double x = (static_cast<double>(i) + 0.5) * static_cast<double>(extent) / static_cast<double>(count) - 0.5;
  return std::clamp(x, 0.0, static_cast<double>(extent - 1));
}

}  // namespace

std::vector<double> project_to_grid(const AttentionMap& m, Grid grid) {
  if (grid.out < 1 || grid.in < 1) throw std::invalid_argument("project_to_grid: grid extents must be >= 1");
  if (m.rows == 0 || m.cols == 0) throw std::invalid_argument("project_to_grid: empty matrix");
  if (m.values.size() != m.rows * m.cols) throw std::invalid_argument("project_to_grid: matrix size mismatch");
  std::vector<double> out(grid.out * grid.in);
  double mass = 0.0;
  for (std::size_t i = 0; i < grid.out; ++i) {
    const double y = source_coord(i, grid.out, m.rows);
    const auto y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, m.rows - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < grid.in; ++j) {
      const double x = source_coord(j, grid.in, m.cols);
      const auto x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, m.cols - 1);
      const double fx = x - static_cast<double>(x0);
      const double v = (1 - fy) * ((1 - fx) * m(y0, x0) + fx * m(y0, x1)) + fy * ((1 - fx) * m(y1, x0) + fx * m(y1, x1));
      out[i * grid.in + j] = v;
      mass += v;
    }
  }
  if (mass > 0.0) {
    const double scale = static_cast<double>(grid.out) / mass;
    for (double& v : out) v *= scale;
  }
  return out;
}

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd centered(const std::vector<double>& data, std::size_t rows, std::size_t cols) {
  Eigen::MatrixXd m = Eigen::Map<const MatrixRM>(data.data(), static_cast<Eigen::Index>(rows),
                                                 static_cast<Eigen::Index>(cols));
  m.rowwise() -= m.colwise().mean();
  return m;
}

Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& c) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  if (eig.info() != Eigen::Success) throw std::runtime_error("cca: eigendecomposition failed");
  const Eigen::VectorXd inv = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

CcaReport cca_mean_correlation(const std::vector<double>& X, const std::vector<double>& Y, std::size_t samples,
                               std::size_t features, std::size_t k, double reg) {
  if (X.size() != samples * features || Y.size() != samples * features) {
    throw std::invalid_argument("cca: both views must be " + std::to_string(samples) + " x " +
                                std::to_string(features));
  }
  if (k < 1) throw std::invalid_argument("cca: k must be >= 1");
  if (samples < k + 2) {
    throw std::invalid_argument("cca: " + std::to_string(samples) + " samples, need at least k + 2 = " +
                                std::to_string(k + 2));
  }
  if (k > features) throw std::invalid_argument("cca: k exceeds the feature count");
  if (!(reg > 0.0)) throw std::invalid_argument("cca: regularization must be > 0");

  const Eigen::MatrixXd x = centered(X, samples, features);
  const Eigen::MatrixXd y = centered(Y, samples, features);
  const double denom = static_cast<double>(samples - 1);
  const auto id = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(features), static_cast<Eigen::Index>(features));
  const Eigen::MatrixXd wx = inverse_sqrt(x.transpose() * x / denom + reg * id);
  const Eigen::MatrixXd wy = inverse_sqrt(y.transpose() * y / denom + reg * id);
  const Eigen::MatrixXd t = wx * (x.transpose() * y / denom) * wy;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (!t.allFinite() || !svd.singularValues().allFinite()) {
    throw std::runtime_error("cca: non-finite result; the views are too rank-deficient for the regularization");
  }
  const auto kk = static_cast<Eigen::Index>(k);
  const Eigen::MatrixXd u = x * (wx * svd.matrixU().leftCols(kk));
  const Eigen::MatrixXd v = y * (wy * svd.matrixV().leftCols(kk));

  CcaReport r;
  r.n = samples;
  r.k = k;
  for (Eigen::Index c = 0; c < kk; ++c) {
    const double nu = u.col(c).norm(), nv = v.col(c).norm();
    double rho = nu > 0.0 && nv > 0.0 ? u.col(c).dot(v.col(c)) / (nu * nv) : 0.0;
    if (!std::isfinite(rho)) throw std::runtime_error("cca: non-finite canonical correlation");
    r.correlations.push_back(std::clamp(rho, 0.0, 1.0));
  }
  std::sort(r.correlations.begin(), r.correlations.end(), std::greater<>());
  r.rho_mean = std::accumulate(r.correlations.begin(), r.correlations.end(), 0.0) / static_cast<double>(k);
  return r;
}

CcaReport alignment_report(const AlignmentSet& a, const AlignmentSet& b, Grid grid, std::size_t k, double reg) {
  if (a.samples.size() != b.samples.size()) {
    throw std::invalid_argument("alignment_report: sample counts differ (" + std::to_string(a.samples.size()) +
                                " vs " + std::to_string(b.samples.size()) + ")");
  }
  const std::size_t n = a.samples.size();
  const std::size_t f = grid.out * grid.in;
  std::vector<double> X, Y;
  X.reserve(n * f);
  Y.reserve(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    if (a.samples[i].id != b.samples[i].id) {
      throw std::invalid_argument("alignment_report: sample id mismatch at position " + std::to_string(i) + " (" +
                                  std::to_string(a.samples[i].id) + " vs " + std::to_string(b.samples[i].id) + ")");
    }
    const auto pa = project_to_grid(a.samples[i].matrix, grid);
    const auto pb = project_to_grid(b.samples[i].matrix, grid);
    X.insert(X.end(), pa.begin(), pa.end());
    Y.insert(Y.end(), pb.begin(), pb.end());
  }
  CcaReport r = cca_mean_correlation(X, Y, n, f, k, reg);
  r.model_a = a.model_tag;
  r.model_b = b.model_tag;
  r.language = a.language.empty() ? b.language : a.language;
  r.grid = grid;
  return r;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

std::string cca_csv_row(const CcaReport& r) {
  char rho[32];
  std::snprintf(rho, sizeof rho, "%.6f", r.rho_mean);
  return csv_field(r.model_a) + "," + csv_field(r.model_b) + "," + csv_field(r.language) + "," + std::to_string(r.n) +
         "," + std::to_string(r.grid.out) + "x" + std::to_string(r.grid.in) + "," + std::to_string(r.k) + "," + rho;
}

void write_cca_csv(const std::filesystem::path& path, const std::vector<CcaReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kCcaCsvHeader << "\n";
  for (const auto& r : reports) out << cca_csv_row(r) << "\n";
}

std::string format_attention_matrix(const AttentionMap& m) {
  std::string s = std::to_string(m.rows) + " " + std::to_string(m.cols) + "\n";
  char buf[32];
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.6g", m(r, c));
      if (c) s += ' ';
      s += buf;
    }
    s += '\n';
  }
  return s;
}

void write_attention_matrix(const std::filesystem::path& path, const AttentionMap& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_attention_matrix(m);
}

AttentionMap read_attention_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  AttentionMap m;
  if (!(in >> m.rows >> m.cols)) throw std::runtime_error(path.string() + ": missing \"T_out T_in\" header");
  m.values.resize(m.rows * m.cols);
  for (double& v : m.values) {
    if (!(in >> v)) throw std::runtime_error(path.string() + ": expected " + std::to_string(m.rows * m.cols) + " values");
  }
  m.target_len = m.rows;
  m.source_len = m.cols;
  return m;
}

void dump_alignments(const AlignmentSet& set, const std::filesystem::path& dir, const std::string& prefix) {
  std::filesystem::create_directories(dir);
  for (const auto& s : set.samples) write_attention_matrix(dir / (prefix + std::to_string(s.id) + ".txt"), s.matrix);
}

}  // namespace charmt
