// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Optional arguments select criteria by number; --out sets the
// artifact directory.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <Eigen/Dense>

#include "bleu_oracle.hpp"
#include "charmt/alignment.hpp"
#include "charmt/bleu.hpp"
#include "charmt/grad_check.hpp"
#include "charmt/pipeline.hpp"
#include "model_fixtures.hpp"

namespace {

using namespace charmt;
using Clock = std::chrono::steady_clock;

// Pinned thresholds.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSecondsLimit = 120.0;
constexpr double kCopyBleu = 99.0;
constexpr int kCopyEpochs = 10;
constexpr double kCopyMinutesLimit = 15.0;
constexpr double kMultiBleu = 90.0;
constexpr int kMultiEpochs = 15;
constexpr double kBleuOracleTolerance = 1e-9;
constexpr double kSelfCcaTolerance = 1e-6;
constexpr double kRotationTolerance = 1e-4;
constexpr double kCheckpointPairRho = 0.999;
constexpr double kInvariantSecondsLimit = 300.0;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;
std::ofstream g_summary;

void report(int id, const std::string& name, const Outcome& o) {
  const std::string line = fmt("%s [%d] %s: ", o.pass ? "PASS" : "FAIL", id, name.c_str()) + o.detail;
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  g_summary << line << '\n' << std::flush;
  if (!o.pass) ++g_failures;
}

// ---- 1 -------------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = Clock::now();
  ModelConfig c = testing::small_config(EncoderKind::kConv, 2, 2, 16, 8);
  c.d_ff = 32;
  Model m(c, 11);
  testing::randomize(m, 12, 0.5);
  Rng rng(13);
  std::vector<std::string> src, tgt;
  for (int i = 0; i < 2; ++i) {
    std::string s, t;
    for (int k = 0; k < 6; ++k) s += static_cast<char>('a' + rng.below(8));
    for (int k = 0; k < 6; ++k) t += static_cast<char>('a' + rng.below(8));
    src.push_back(s);
    tgt.push_back(t);
  }
  const Vocabulary vocab = testing::toy_vocab(8);
  const Batch batch = make_batch(src, tgt, vocab);
  const auto report = grad_check(
      [&] {
        const Tensor logits = model_forward(m, batch).logits;
        return masked_cross_entropy(logits, batch.tgt_out_ids, batch.tgt_mask, 0.1);
      },
      m.params(), 1e-5, kGradTolerance, 1e-6, true);
  const double secs = seconds_since(start);
  return {report.passed && secs < kGradSecondsLimit && batch.src_len == 7 && vocab.size() == 12,
          fmt("T=%zu, V=%zu, %zu parameters, max rel err %.2e (tol %.0e; %zu coordinate(s) near a ReLU kink judged "
              "at h/100), %.1f s (limit %.0f s)",
              batch.src_len, vocab.size(), m.params().scalar_count(), report.max_rel_error, kGradTolerance,
              report.refined, secs, kGradSecondsLimit)};
}

// ---- 2 -------------------------------------------------------------------

Outcome residual_identity() {
  ModelConfig cs = testing::small_config(EncoderKind::kStandard, 2, 2, 16, 8);
  ModelConfig cc = cs;
  cc.encoder_kind = EncoderKind::kConv;
  Model standard(cs, 3), conv(cc, 4);
  testing::randomize(standard, 5, 0.7);
  std::size_t zeroed = 0;
  for (auto& [name, t] : conv.params()) {
    if (standard.params().contains(name)) {
      const auto from = standard.params().at(name).data();
      std::copy(from.begin(), from.end(), t.mutable_data().begin());
    } else {
      for (double& v : t.mutable_data()) v = 0.0;
      zeroed += t.numel();
    }
  }
  Rng rng(6);
  std::vector<std::string> src, tgt;
  for (int i = 0; i < 4; ++i) {
    std::string s, t;
    for (std::size_t k = 0, n = 1 + rng.below(12); k < n; ++k) s += static_cast<char>('a' + rng.below(8));
    for (std::size_t k = 0, n = 1 + rng.below(12); k < n; ++k) t += static_cast<char>('a' + rng.below(8));
    src.push_back(s);
    tgt.push_back(t);
  }
  const Batch batch = make_batch(src, tgt, testing::toy_vocab(8));
  NoGradGuard guard;
  const DecoderOutput a = model_forward(standard, batch), b = model_forward(conv, batch);
  bool same = std::equal(a.logits.data().begin(), a.logits.data().end(), b.logits.data().begin());
  for (std::size_t l = 0; l < a.cross_attention.size(); ++l) {
    same = same && std::equal(a.cross_attention[l].data().begin(), a.cross_attention[l].data().end(),
                              b.cross_attention[l].data().begin());
  }
  return {same && zeroed > 0, fmt("%zu conv scalars zeroed; logits and %zu cross-attention maps %s at float64", zeroed,
                                  a.cross_attention.size(), same ? "bit-identical" : "DIFFER")};
}

// ---- 3 -------------------------------------------------------------------

Outcome non_goal_documented() {
  std::ifstream in(std::string(CHARMT_SOURCE_DIR) + "/README.md");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  const auto section = text.find("## Non-goals");
  const bool documented = section != std::string::npos && text.find("full-scale", section) != std::string::npos;
  return {documented, documented ? "full-scale benchmark BLEU is a documented non-goal (README, Non-goals); "
                                   "desk-scale criteria 4-7 stand in for it"
                                 : "README lacks the Non-goals statement"};
}

// ---- Toy tasks -----------------------------------------------------------

std::string random_string(Rng& rng, const std::string& alphabet, std::size_t lo, std::size_t hi) {
  std::string s;
  const std::size_t len = lo + rng.below(hi - lo + 1);
  for (std::size_t k = 0; k < len; ++k) s += alphabet[rng.below(alphabet.size())];
  return s;
}

ModelConfig toy_model(EncoderKind kind, int vocab_size) {
  ModelConfig c;
  c.encoder_kind = kind;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_ff = 256;
  c.dropout = 0.0;
  c.max_len = 64;
  c.vocab_size = vocab_size;
  return c;
}

TrainConfig toy_training(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.max_tokens = TOY_MAX_TOKENS;
  t.warmup = TOY_WARMUP;
  t.lr_scale = TOY_LR_SCALE;
  t.label_smoothing = TOY_LABEL_SMOOTHING;
  t.seed = 1;
  t.bleu_tokenizer = BleuTokenizer::kCharacter;
  return t;
}

struct TaskRun {
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
  std::unique_ptr<Model> model;
};

TaskRun train_task(EncoderKind kind, const Vocabulary& vocab, const ParallelCorpus& train,
                   const std::vector<ValidationSet>& valid, int epochs, const std::string& label) {
  TaskRun run;
  run.model = std::make_unique<Model>(toy_model(kind, static_cast<int>(vocab.size())), 1);
  Trainer trainer(*run.model, vocab, train, valid, toy_training(epochs));
  const auto start = Clock::now();
  trainer.run([&](const Trainer&, const EpochRecord& r) {
    run.epochs.push_back(r);
    std::string sets;
    for (const auto& s : r.per_set) sets += fmt(" %s=%.2f", s.name.c_str(), s.bleu);
    std::fprintf(stderr, "  %s epoch %d: train_loss %.4f val_loss %.4f BLEU%s (%.0f s)\n", label.c_str(), r.epoch,
                 r.train_loss, r.val_loss, sets.c_str(), seconds_since(start));
  });
  run.seconds = seconds_since(start);
  return run;
}

// ---- 4 -------------------------------------------------------------------

struct CopyArtifacts {
  Vocabulary vocab;
  std::unique_ptr<Model> conv_model;
};

Outcome copy_task(const std::filesystem::path& out, CopyArtifacts& keep) {
  const std::string alphabet = "abcdefghij";
  Rng rng(2024);
  std::vector<std::pair<std::string, std::string>> train, valid;
  for (int i = 0; i < 5000; ++i) {
    const std::string s = random_string(rng, alphabet, 5, 20);
    train.emplace_back(s, s);
  }
  for (int i = 0; i < 300; ++i) {
    const std::string s = random_string(rng, alphabet, 5, 20);
    valid.emplace_back(s, s);
  }
  const ParallelCorpus train_corpus = make_corpus(train, "copy");
  const std::vector<ParallelCorpus> parts{train_corpus};
  keep.vocab = build_vocab(parts);
  const std::vector<ValidationSet> val{{"copy", make_corpus(valid, "copy")}};

  std::string csv = "model,epoch,val_bleu,val_loss,train_loss\n";
  std::string detail;
  bool pass = true;
  double total_seconds = 0.0;
  for (EncoderKind kind : {EncoderKind::kStandard, EncoderKind::kConv}) {
    TaskRun run = train_task(kind, keep.vocab, train_corpus, val, kCopyEpochs, "copy/" + to_string(kind));
    total_seconds += run.seconds;
    int reached = 0;
    double best = 0.0;
    for (const auto& e : run.epochs) {
      csv += fmt("%s,%d,%.4f,%.6f,%.6f\n", to_string(kind).c_str(), e.epoch, e.val_bleu, e.val_loss, e.train_loss);
      best = std::max(best, e.val_bleu);
      if (!reached && e.val_bleu > kCopyBleu) reached = e.epoch;
    }
    pass = pass && reached > 0;
    detail += fmt("%s best BLEU %.2f (first > %.0f at epoch %s), final %.2f, %.0f s; ", to_string(kind).c_str(), best,
                  kCopyBleu, reached ? std::to_string(reached).c_str() : "never", run.epochs.back().val_bleu,
                  run.seconds);
    if (kind == EncoderKind::kConv) keep.conv_model = std::move(run.model);
  }
  std::ofstream(out / "copy_curves.csv") << csv;
  const double minutes = total_seconds / 60.0;
  pass = pass && minutes < kCopyMinutesLimit;
  detail += fmt("both models %.1f min (limit %.0f)", minutes, kCopyMinutesLimit);
  return {pass, detail};
}

// ---- 5 -------------------------------------------------------------------

Outcome multilingual_task(const std::filesystem::path& out) {
  const std::string target_alphabet = "abcdefghij";
  Rng rng(77);
  // Two substitution ciphers with disjoint source alphabets.
  std::string cipher_x = "klmnopqrst", cipher_y = "ABCDEFGHIJ";
  rng.shuffle(std::span<char>(cipher_x.data(), cipher_x.size()));
  rng.shuffle(std::span<char>(cipher_y.data(), cipher_y.size()));
  auto encipher = [&](const std::string& t, const std::string& key) {
    std::string s;
    for (char c : t) s += key[static_cast<std::size_t>(c - 'a')];
    return s;
  };
  std::vector<std::pair<std::string, std::string>> tx, ty, vx, vy;
  for (int i = 0; i < 2500; ++i) {
    const std::string t = random_string(rng, target_alphabet, 5, 20);
    tx.emplace_back(encipher(t, cipher_x), t);
    ty.emplace_back(encipher(t, cipher_y), t);
  }
  for (int i = 0; i < 200; ++i) {
    const std::string t = random_string(rng, target_alphabet, 5, 20);
    vx.emplace_back(encipher(t, cipher_x), t);
    vy.emplace_back(encipher(t, cipher_y), t);
  }
  const std::vector<ParallelCorpus> parts{make_corpus(tx, "x"), make_corpus(ty, "y")};
  const ParallelCorpus mixed = mix_corpora(parts, 5);
  const Vocabulary vocab = build_vocab(parts);
  const std::vector<ValidationSet> val{{"x", make_corpus(vx, "x")}, {"y", make_corpus(vy, "y")}};

  std::string csv = "model,epoch,bleu_x,bleu_y,val_bleu\n";
  std::string detail = fmt("%zu mixed pairs, vocab %zu, no language ids; ", mixed.size(), vocab.size());
  bool pass = true;
  int epochs_to_90[2] = {0, 0};
  int idx = 0;
  for (EncoderKind kind : {EncoderKind::kStandard, EncoderKind::kConv}) {
    const TaskRun run = train_task(kind, vocab, mixed, val, kMultiEpochs, "cipher/" + to_string(kind));
    double best_x = 0.0, best_y = 0.0;
    for (const auto& e : run.epochs) {
      const double bx = e.per_set[0].bleu, by = e.per_set[1].bleu;
      csv += fmt("%s,%d,%.4f,%.4f,%.4f\n", to_string(kind).c_str(), e.epoch, bx, by, e.val_bleu);
      best_x = std::max(best_x, bx);
      best_y = std::max(best_y, by);
      if (!epochs_to_90[idx] && bx > kMultiBleu && by > kMultiBleu) epochs_to_90[idx] = e.epoch;
    }
    pass = pass && epochs_to_90[idx] > 0;
    detail += fmt("%s reaches > %.0f on both sets at epoch %s (best x %.2f, y %.2f); ", to_string(kind).c_str(),
                  kMultiBleu, epochs_to_90[idx] ? std::to_string(epochs_to_90[idx]).c_str() : "never", best_x, best_y);
    ++idx;
  }
  std::ofstream(out / "multilingual_curves.csv") << csv;
  const bool conv_faster = epochs_to_90[1] && (!epochs_to_90[0] || epochs_to_90[1] <= epochs_to_90[0]);
  detail += fmt("epochs-to-%.0f conv %d vs standard %d (%s; reported, not gated)", kMultiBleu, epochs_to_90[1],
                epochs_to_90[0], conv_faster ? "conv no slower" : "conv slower");
  return {pass, detail};
}

// ---- 6 -------------------------------------------------------------------

Outcome bleu_oracle() {
  Rng rng(2024);
  const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t sentences = 1 + rng.below(10);
    std::vector<std::string> hyps, refs;
    for (std::size_t s = 0; s < sentences; ++s) {
      for (auto* out : {&hyps, &refs}) {
        std::string line;
        const std::size_t n = 1 + rng.below(12);
        for (std::size_t i = 0; i < n; ++i) line += (i ? " " : "") + words[rng.below(words.size())];
        out->push_back(line);
      }
    }
    worst = std::max(worst, std::abs(corpus_bleu(hyps, refs) - testing::oracle_bleu(hyps, refs)));
  }
  const std::vector<std::string> h{"the cat sat on the mat", "a b c"};
  const std::vector<std::string> disjoint{"x y z w", "q r s"};
  const double same = corpus_bleu(h, h), none = corpus_bleu(h, disjoint);
  return {worst <= kBleuOracleTolerance && same == 100.0 && none == 0.0,
          fmt("20 random corpora max |diff| %.1e (tol %.0e); identical %.2f, disjoint %.2f", worst,
              kBleuOracleTolerance, same, none)};
}

// ---- 7 -------------------------------------------------------------------

std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Outcome cca_suite(const std::filesystem::path& out, const CopyArtifacts* copy) {
  const std::size_t n = 500, f = 64;
  Rng rng(31);
  const auto X = gaussian(n * f, rng);
  const double self = cca_mean_correlation(X, X, n, f).rho_mean;

  auto Y = gaussian(n * f, rng);
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = X[i] + 0.5 * Y[i];
  Eigen::MatrixXd a(f, f);
  for (std::size_t i = 0; i < f * f; ++i) a(i / f, i % f) = rng.normal();
  const Eigen::MatrixXd R = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RM yr = Eigen::Map<const RM>(Y.data(), n, f) * R;
  const double rotation_gap = std::abs(cca_mean_correlation(X, Y, n, f).rho_mean -
                                       cca_mean_correlation(X, std::vector<double>(yr.data(), yr.data() + n * f), n, f)
                                           .rho_mean);

  int ordered = 0;
  double independent_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(100 + seed);
    const auto A = gaussian(n * f, r), noise = gaussian(n * f, r), Z = gaussian(n * f, r);
    std::vector<double> B(n * f);
    for (std::size_t i = 0; i < B.size(); ++i) B[i] = A[i] + 0.1 * noise[i];
    const double paired = cca_mean_correlation(A, B, n, f).rho_mean;
    const double independent = cca_mean_correlation(A, Z, n, f).rho_mean;
    independent_sum += independent;
    ordered += paired > independent;
  }

  // Two checkpoints of one trained model (float64 and float32 storage).
  double pair_rho = 0.0;
  std::string pair_note = "no trained model available";
  if (copy && copy->conv_model) {
    save_checkpoint(out / "copy_conv_f64.ckpt", *copy->conv_model, copy->vocab, nullptr, kCopyEpochs);
    save_checkpoint(out / "copy_conv_f32.ckpt", *copy->conv_model, copy->vocab, nullptr, kCopyEpochs,
                    nlohmann::json::object(), StorageType::kFloat32);
    const LoadedModel ma(out / "copy_conv_f64.ckpt"), mb(out / "copy_conv_f32.ckpt");
    Rng r(55);
    std::vector<std::pair<std::string, std::string>> pairs;
    for (int i = 0; i < 600; ++i) {
      const std::string s = random_string(r, "abcdefghij", 5, 20);
      pairs.emplace_back(s, s);
    }
    const ParallelCorpus corpus = make_corpus(pairs, "copy");
    const AlignmentSet sa = collect_alignments(ma.model, corpus, ma.checkpoint.vocab, 500, 9, "conv_f64");
    const AlignmentSet sb = collect_alignments(mb.model, corpus, mb.checkpoint.vocab, 500, 9, "conv_f32");
    const CcaReport rep = alignment_report(sa, sb);
    write_cca_csv(out / "checkpoint_pair_cca.csv", {rep});
    pair_rho = rep.rho_mean;
    pair_note = fmt("checkpoint pair rho %.6f (>= %.3f; n=500, grid 32x32, k=10)", pair_rho, kCheckpointPairRho);
  }
  const bool pass = std::abs(self - 1.0) <= kSelfCcaTolerance && rotation_gap <= kRotationTolerance &&
                    ordered == 10 && pair_rho >= kCheckpointPairRho;
  return {pass, fmt("rho(S,S) %.9f (tol %.0e); rotation gap %.1e (tol %.0e); ordering %d/10 (independent mean "
                    "%.3f); %s",
                    self, kSelfCcaTolerance, rotation_gap, kRotationTolerance, ordered, independent_sum / 10.0,
                    pair_note.c_str())};
}

// ---- 8 -------------------------------------------------------------------

Outcome invariant_suites() {
  struct Suite {
    const char* binary;
    const char* filter;
  };
  const Suite suites[] = {
      {TEST_MODEL_BIN, "Causality.*:PaddingInvariance.*"},
      {TEST_TENSOR_BIN, "Softmax.MaskedPositionsAreExactlyZero:Softmax.FullyMaskedSliceIsAnError:Softmax.BroadcastMaskRowsAreStochastic"},
      {TEST_TEXT_BIN, "Encode.RoundTripProperty:Vocabulary.SaveLoadKeepsIds:Mix.*:Batch.LayoutAndMasks"},
      {TEST_TRAINING_BIN, "Checkpoint.ResumeMatchesUninterruptedRun"},
  };
  const auto start = Clock::now();
  int passed = 0;
  std::string failed;
  for (const auto& s : suites) {
    const std::string cmd = std::string("'") + s.binary + "' --gtest_filter='" + s.filter + "' > /dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    if (WIFEXITED(raw) && WEXITSTATUS(raw) == 0) {
      ++passed;
    } else {
      failed += std::string(" ") + s.filter;
    }
  }
  const double secs = seconds_since(start);
  return {passed == 4 && secs < kInvariantSecondsLimit,
          fmt("causality, padding invariance, masking, vocab round trip, mix multiset, resume equivalence: %d/4 "
              "suites green in %.1f s (limit %.0f s)%s",
              passed, secs, kInvariantSecondsLimit, failed.c_str())};
}

// ---- 9 -------------------------------------------------------------------

Outcome parameter_accounting() {
  ModelConfig c;
  c.n_layers = 6;
  c.d_model = 512;
  c.n_heads = 8;
  c.d_ff = 2048;
  c.vocab_size = 300;
  c.max_len = 8;
  std::size_t enumerated[2];
  bool closed_ok = true;
  int i = 0;
  for (EncoderKind kind : {EncoderKind::kStandard, EncoderKind::kConv}) {
    c.encoder_kind = kind;
    const Model m(c, 1);
    enumerated[i] = m.params().scalar_count();
    closed_ok = closed_ok && enumerated[i] == closed_form_parameter_count(c);
    ++i;
  }
  const std::size_t d = 512;
  const std::size_t expected_delta = 6 * (24 * d * d + 4 * d);
  const std::size_t delta = enumerated[1] - enumerated[0];
  return {closed_ok && delta == expected_delta,
          fmt("standard %zu, conv %zu scalars (enumerated == closed form: %s); delta %zu vs 6*(24d^2+4d) = %zu",
              enumerated[0], enumerated[1], closed_ok ? "yes" : "no", delta, expected_delta)};
}

}  // namespace

int main(int argc, char** argv) {
  std::filesystem::path out = "acceptance_artifacts";
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else {
      selected.insert(std::stoi(arg));
    }
  }
  std::filesystem::create_directories(out);
  g_summary.open(out / "acceptance.txt");
  auto want = [&](int id) { return selected.empty() || selected.count(id); };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!want(id)) return;
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("threw: ") + e.what()});
    }
  };

  CopyArtifacts copy;
  guarded(1, "gradient suite", gradient_suite);
  guarded(2, "residual-identity equivalence", residual_identity);
  guarded(3, "full-scale results as non-goal", non_goal_documented);
  guarded(4, "toy copy task", [&] { return copy_task(out, copy); });
  guarded(5, "toy multilingual cipher task", [&] { return multilingual_task(out); });
  guarded(6, "BLEU oracle equivalence", bleu_oracle);
  guarded(7, "CCA suite", [&] { return cca_suite(out, want(4) ? &copy : nullptr); });
  guarded(8, "invariant suites", invariant_suites);
  guarded(9, "parameter accounting", parameter_accounting);
  std::printf("%s: %d criterion(s) failed\n", g_failures ? "FAILED" : "ALL PASSED", g_failures);
  g_summary << (g_failures ? "FAILED" : "ALL PASSED") << ": " << g_failures << " criterion(s) failed\n";
  return g_failures ? 1 : 0;
}
