#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <sys/wait.h>
#include <fstream>
#include <sstream>

#include "charmt/pipeline.hpp"
#include "test_util.hpp"

namespace charmt {
namespace {

using testing::temp_dir;

struct RunResult {
  int status = 0;
  std::string out;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

RunResult run(const std::filesystem::path& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = "cd '" + dir.string() + "' && '" + CHARMT_CLI + "' " + args + " > '" + out.string() +
                          "' 2> '" + err.string() + "'";
  const int raw = std::system(cmd.c_str());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

// A small copy corpus plus a run config training a tiny conv model on it.
std::filesystem::path copy_fixture(const std::string& name, int epochs) {
  const auto dir = temp_dir(name);
  Rng rng(1);
  std::string train, valid;
  for (int i = 0; i < 80; ++i) {
    std::string s;
    for (std::size_t k = 0, len = 2 + rng.below(5); k < len; ++k) s += static_cast<char>('a' + rng.below(5));
    (i < 60 ? train : valid) += s + "\n";
  }
  spit(dir / "train.src", train);
  spit(dir / "train.tgt", train);
  spit(dir / "valid.src", valid);
  spit(dir / "valid.tgt", valid);
  nlohmann::json cfg = {
      {"model", {{"encoder_kind", "conv"}, {"n_layers", 1}, {"n_heads", 2}, {"d_model", 8}, {"d_ff", 16},
                 {"dropout", 0.1}, {"max_len", 32}}},
      {"train", {{"epochs", epochs}, {"max_tokens", 60}, {"warmup", 10}, {"seed", 5}, {"bleu_tokenizer", "char"}}},
      {"data", {{"train", {{{"language", "cp"}, {"source", "train.src"}, {"target", "train.tgt"}}}},
                {"valid", {{{"language", "cp"}, {"source", "valid.src"}, {"target", "valid.tgt"}}}}}},
      {"analyze", {{"n", 16}, {"grid", {6, 6}}, {"k", 4}}}};
  spit(dir / "run.json", cfg.dump(2));
  return dir;
}

TEST(CliBuildVocab, FixtureSizeAndDeterminism) {
  const auto dir = temp_dir("cli_vocab");
  spit(dir / "s.txt", "ab\n");
  spit(dir / "t.txt", "ba\n");
  const RunResult r = run(dir, "build-vocab --src s.txt --tgt t.txt --out v.txt");
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, "vocab size 6\n");
  const std::string first = slurp(dir / "v.txt");
  EXPECT_EQ(run(dir, "build-vocab --src s.txt --tgt t.txt --out v.txt").status, 0);
  EXPECT_EQ(slurp(dir / "v.txt"), first);
}

TEST(CliBuildVocab, MissingFileNamesPath) {
  const auto dir = temp_dir("cli_vocab_missing");
  spit(dir / "t.txt", "ba\n");
  const RunResult r = run(dir, "build-vocab --src nowhere.txt --tgt t.txt --out v.txt");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("nowhere.txt"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "v.txt"));
}

TEST(CliTrain, ZeroEpochsWritesInitialCheckpointAndEmptyLog) {
  const auto dir = copy_fixture("cli_train0", 0);
  const RunResult r = run(dir, "train --config run.json --out out");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "out/latest.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "out/best.ckpt"));
  EXPECT_EQ(slurp(dir / "out/train_log.csv"), std::string(TrainLog::kCsvHeader) + "\n");
  // The echoed config is the resolved one and loads back unchanged.
  const RunConfig echoed = load_run_config(dir / "out/config.json");
  EXPECT_EQ(echoed.model.vocab_size, 9);
  EXPECT_EQ(to_json(echoed), nlohmann::json::parse(slurp(dir / "out/config.json")));
  const Checkpoint ck = load_checkpoint(dir / "out/latest.ckpt");
  EXPECT_EQ(ck.step, 0u);
  EXPECT_EQ(ck.params.scalar_count(), closed_form_parameter_count(ck.config));
}

TEST(CliTrain, SameConfigGivesIdenticalLog) {
  const auto dir = copy_fixture("cli_train_det", 2);
  ASSERT_EQ(run(dir, "train --config run.json --out a").status, 0);
  ASSERT_EQ(run(dir, "train --config run.json --out b").status, 0);
  const std::string log = slurp(dir / "a/train_log.csv");
  EXPECT_GT(count_lines(log), 2u);
  EXPECT_EQ(log, slurp(dir / "b/train_log.csv"));
  EXPECT_EQ(slurp(dir / "a/epochs.csv"), slurp(dir / "b/epochs.csv"));
  EXPECT_EQ(slurp(dir / "a/latest.ckpt"), slurp(dir / "b/latest.ckpt"));
}

TEST(CliTrain, ResumeReproducesUninterruptedRun) {
  const auto dir = copy_fixture("cli_resume", 3);
  ASSERT_EQ(run(dir, "train --config run.json --out full").status, 0);
  auto cfg = nlohmann::json::parse(slurp(dir / "run.json"));
  cfg["train"]["epochs"] = 1;
  spit(dir / "one.json", cfg.dump());
  ASSERT_EQ(run(dir, "train --config one.json --out part").status, 0);
  const RunResult r = run(dir, "train --config run.json --out part --resume");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(dir / "part/train_log.csv"), slurp(dir / "full/train_log.csv"));
  EXPECT_EQ(slurp(dir / "part/epochs.csv"), slurp(dir / "full/epochs.csv"));
  EXPECT_EQ(slurp(dir / "part/latest.ckpt"), slurp(dir / "full/latest.ckpt"));
}

TEST(CliTrain, InvalidConfigListsEveryKey) {
  const auto dir = temp_dir("cli_badcfg");
  spit(dir / "bad.json",
       R"({"model": {"d_modle": 16, "n_heads": 3}, "train": {"epochs": -2, "lr": 1}, "eval": {"beam": 2}, "extra": 0})");
  const RunResult r = run(dir, "train --config bad.json --out out");
  EXPECT_NE(r.status, 0);
  for (const char* key : {"model.d_modle", "train.lr", "eval.beam", "extra", "train.epochs", "model.d_model"}) {
    EXPECT_NE(r.err.find(key), std::string::npos) << key << " missing from:\n" << r.err;
  }
}

TEST(CliTranslate, LineCountsBeamOneAndDumps) {
  const auto dir = copy_fixture("cli_translate", 1);
  ASSERT_EQ(run(dir, "train --config run.json --out out").status, 0);
  spit(dir / "empty.txt", "");
  RunResult r = run(dir, "translate --ckpt out/latest.ckpt --in empty.txt --out empty.hyp");
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(dir / "empty.hyp"), "");
  r = run(dir, "translate --ckpt out/latest.ckpt --in valid.src --out greedy.hyp --dump-attn attn");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(count_lines(slurp(dir / "greedy.hyp")), 20u);
  EXPECT_TRUE(std::filesystem::exists(dir / "attn/sent_0.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "attn/sent_19.txt"));
  ASSERT_EQ(run(dir, "translate --ckpt out/latest.ckpt --in valid.src --out beam1.hyp --beam 1").status, 0);
  EXPECT_EQ(slurp(dir / "beam1.hyp"), slurp(dir / "greedy.hyp"));
  ASSERT_EQ(run(dir, "translate --ckpt out/latest.ckpt --in valid.src --out beam3.hyp --beam 3").status, 0);
  EXPECT_EQ(count_lines(slurp(dir / "beam3.hyp")), 20u);
}

TEST(CliTranslate, ReportsCharactersOutsideVocabulary) {
  const auto dir = copy_fixture("cli_translate_oov", 0);
  ASSERT_EQ(run(dir, "train --config run.json --out out").status, 0);
  spit(dir / "oov.txt", "abz\nqq\n");
  const RunResult r = run(dir, "translate --ckpt out/latest.ckpt --in oov.txt --out oov.hyp");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.err.find("3 input character(s) are not in the checkpoint vocabulary"), std::string::npos) << r.err;
  EXPECT_EQ(count_lines(slurp(dir / "oov.hyp")), 2u);
}

TEST(CliScore, PerfectAndMismatch) {
  const auto dir = temp_dir("cli_score");
  spit(dir / "r.txt", "the cat sat\na b c d\n");
  spit(dir / "short.txt", "the cat sat\n");
  RunResult r = run(dir, "score --hyp r.txt --ref r.txt");
  EXPECT_EQ(r.status, 0);
  EXPECT_EQ(r.out, "BLEU 100.00\n");
  r = run(dir, "score --hyp short.txt --ref r.txt");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.err.find("lines"), std::string::npos);
}

TEST(CliAnalyze, SelfComparisonAndHeader) {
  const auto dir = copy_fixture("cli_analyze", 1);
  ASSERT_EQ(run(dir, "train --config run.json --out out").status, 0);
  const RunResult r = run(dir,
                          "analyze --ckpt-a out/latest.ckpt --ckpt-b out/latest.ckpt --src valid.src --ref valid.tgt "
                          "--out report.csv --config run.json --lang cp --dump-attn dumps");
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream csv(slurp(dir / "report.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "model_a,model_b,test_lang,n,grid,k,rho_mean");
  EXPECT_EQ(row.substr(0, row.rfind(',')), "latest,latest,cp,16,6x6,4");
  EXPECT_GE(std::stod(row.substr(row.rfind(',') + 1)), 0.999);
  EXPECT_TRUE(std::filesystem::exists(dir / "dumps/latest"));
}

}  // namespace
}  // namespace charmt
