#include <gtest/gtest.h>

#include <fstream>

#include "charmt/run_config.hpp"
#include "test_util.hpp"

namespace charmt {
namespace {

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  const RunConfig c = run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(c.train, TrainConfig{});
  EXPECT_EQ(c.eval, DecodeConfig{});
  EXPECT_EQ(c.analyze, AnalyzeConfig{});
  EXPECT_EQ(c.model.d_model, 512);
  EXPECT_EQ(c.model.vocab_size, 0);
  EXPECT_EQ(c.analyze.grid, (Grid{32, 32}));
  EXPECT_EQ(c.analyze.k, 10u);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.model.encoder_kind = EncoderKind::kConv;
  c.model.d_model = 64;
  c.model.vocab_size = 20;
  c.train.epochs = 7;
  c.train.bleu_tokenizer = BleuTokenizer::kCharacter;
  c.data.train = {{"fr", "/d/fr.src", "/d/fr.tgt"}, {"es", "/d/es.src", "/d/es.tgt"}};
  c.data.valid = {{"fr", "/d/v.src", "/d/v.tgt"}};
  c.data.translit = "/d/table.tsv";
  c.eval.strategy = DecodeStrategy::kBeam;
  c.eval.beam_size = 6;
  c.analyze.grid = {16, 24};
  c.analyze.n = 40;
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
}

TEST(RunConfig, RelativePathsResolveAgainstConfigDirectory) {
  const auto dir = testing::temp_dir("runcfg_paths");
  std::ofstream(dir / "run.json") << R"({"data": {"train": [{"source": "a.src", "target": "/abs/a.tgt"}],
                                                  "translit": "t.tsv"}})";
  const RunConfig c = load_run_config(dir / "run.json");
  ASSERT_EQ(c.data.train.size(), 1u);
  EXPECT_EQ(c.data.train[0].source, dir / "a.src");
  EXPECT_EQ(c.data.train[0].target, std::filesystem::path("/abs/a.tgt"));
  EXPECT_EQ(c.data.translit, dir / "t.tsv");
  EXPECT_TRUE(c.data.vocab.empty());
}

TEST(RunConfig, CollectsEveryError) {
  const nlohmann::json j = {{"model", {{"d_model", 15}, {"dropout", "high"}}},
                            {"data", {{"train", {{{"source", "x"}}}}, {"min_count", 0}, {"langs", 1}}},
                            {"analyze", {{"grid", {4}}, {"reg", 0.0}}},
                            {"train", {{"warmup", 0}}}};
  try {
    run_config_from_json(j);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const char* part : {"model.dropout: wrong type", "model.d_model must be even", "data.train[0].target: required",
                             "data.min_count", "data.langs: unknown key", "analyze.grid", "analyze.reg",
                             "train.warmup must be >= 1"}) {
      EXPECT_NE(msg.find(part), std::string::npos) << part << "\n" << msg;
    }
  }
}

TEST(RunConfig, MalformedJsonFileIsReported) {
  const auto dir = testing::temp_dir("runcfg_bad");
  std::ofstream(dir / "run.json") << "{\"model\": ";
  EXPECT_THROW(load_run_config(dir / "run.json"), std::invalid_argument);
  EXPECT_THROW(load_run_config(dir / "absent.json"), std::runtime_error);
}

}  // namespace
}  // namespace charmt
