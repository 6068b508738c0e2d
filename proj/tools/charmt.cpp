// Command-line front end: build-vocab, train, translate, score, analyze.
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "charmt/pipeline.hpp"

namespace {

using namespace charmt;

int build_vocab_cmd(const std::vector<std::string>& src, const std::vector<std::string>& tgt, const std::string& out,
                    const std::string& translit, std::size_t min_count) {
  if (src.size() != tgt.size()) {
    throw std::invalid_argument("--src and --tgt must be given the same number of times (" +
                                std::to_string(src.size()) + " vs " + std::to_string(tgt.size()) + ")");
  }
  std::optional<TransliterationTable> table;
  if (!translit.empty()) table = TransliterationTable::load_tsv(translit);
  std::vector<ParallelCorpus> corpora;
  for (std::size_t i = 0; i < src.size(); ++i) {
    ParallelCorpus c = load_parallel_corpus(src[i], tgt[i]);
    corpora.push_back(table ? transliterate_sources(c, *table) : c);
  }
  const Vocabulary vocab = build_vocab(corpora, min_count);
  vocab.save(out);
  std::cout << "vocab size " << vocab.size() << "\n";
  return 0;
}

int train_cmd(const std::string& config_path, const std::string& out, bool resume) {
  const RunConfig config = load_run_config(config_path);
  const TrainOutcome o = train_run(config, out, resume, &std::cerr);
  if (!o.log.epochs.empty()) {
    const auto& last = o.log.epochs.back();
    std::printf("epochs %d steps %llu final val_bleu %.2f best val_bleu %.2f (epoch %d)\n", last.epoch,
                static_cast<unsigned long long>(last.step), last.val_bleu, o.best_bleu, o.best_epoch);
  } else {
    std::printf("no epochs run; initial checkpoint written to %s\n", o.latest.string().c_str());
  }
  return 0;
}

int translate_cmd(const std::string& ckpt, const std::string& in, const std::string& out, int beam,
                  double length_penalty, const std::string& dump_dir) {
  const LoadedModel loaded(ckpt);
  std::vector<std::string> sources = read_lines(in);
  for (auto& s : sources) s = loaded.prepare_source(s);
  if (const std::size_t unknown = loaded.unknown_characters(sources)) {
    std::cerr << "warning: " << unknown << " input character(s) are not in the checkpoint vocabulary of "
              << loaded.checkpoint.vocab.size() << " entries and will be read as UNK\n";
  }
  DecodeConfig cfg;
  cfg.length_penalty = length_penalty;
  if (beam > 1) {
    cfg.strategy = DecodeStrategy::kBeam;
    cfg.beam_size = beam;
  } else if (beam < 1) {
    throw std::invalid_argument("--beam must be >= 1");
  }
  cfg.validate();
  const auto hyps = translate_lines(loaded.model, loaded.checkpoint.vocab, sources, cfg);
  std::vector<std::string> lines;
  for (const auto& h : hyps) lines.push_back(h.text);
  write_lines(out, lines);
  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      write_attention_matrix(std::filesystem::path(dump_dir) / ("sent_" + std::to_string(i) + ".txt"),
                             hyps[i].attention);
    }
  }
  return 0;
}

int score_cmd(const std::string& hyp, const std::string& ref, const std::string& tokenizer, bool smooth) {
  BleuOptions opt;
  opt.tokenizer = bleu_tokenizer_from_string(tokenizer);
  opt.smoothing = smooth;
  const auto h = read_lines(hyp);
  const auto r = read_lines(ref);
  if (h.size() != r.size()) {
    throw std::invalid_argument(hyp + " has " + std::to_string(h.size()) + " lines but " + ref + " has " +
                                std::to_string(r.size()));
  }
  std::cout << format_bleu(corpus_bleu(h, r, opt)) << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string ckpt_a, ckpt_b, src, ref, out, lang, tag_a, tag_b, dump_dir, config;
  std::size_t n = 0, k = 0;
  std::vector<std::size_t> grid;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int analyze_cmd(AnalyzeArgs a) {
  AnalyzeConfig ac;
  if (!a.config.empty()) ac = load_run_config(a.config).analyze;
  if (a.n) ac.n = a.n;
  if (a.k) ac.k = a.k;
  if (!a.grid.empty()) {
    if (a.grid.size() != 2 || a.grid[0] < 1 || a.grid[1] < 1) throw std::invalid_argument("--grid takes two extents >= 1");
    ac.grid = {a.grid[0], a.grid[1]};
  }
  if (a.seed_set) ac.seed = a.seed;
  const LoadedModel ma(a.ckpt_a), mb(a.ckpt_b);
  if (!(ma.checkpoint.vocab == mb.checkpoint.vocab)) {
    throw std::invalid_argument("the two checkpoints use different vocabularies");
  }
  const ParallelCorpus raw = load_parallel_corpus(a.src, a.ref, a.lang);
  auto tag = [](const std::string& given, const std::string& path) {
    return given.empty() ? std::filesystem::path(path).stem().string() : given;
  };
  auto collect = [&](const LoadedModel& m, const std::string& t) {
    ParallelCorpus c = raw;
    for (auto& p : c.pairs) p.source = m.prepare_source(p.source);
    return collect_alignments(m.model, c, m.checkpoint.vocab, std::min(ac.n, c.size()), ac.seed, t);
  };
  const AlignmentSet sa = collect(ma, tag(a.tag_a, a.ckpt_a));
  const AlignmentSet sb = collect(mb, tag(a.tag_b, a.ckpt_b));
  const CcaReport report = alignment_report(sa, sb, ac.grid, ac.k, ac.reg);
  write_cca_csv(a.out, {report});
  if (!a.dump_dir.empty()) {
    dump_alignments(sa, std::filesystem::path(a.dump_dir) / sa.model_tag);
    dump_alignments(sb, std::filesystem::path(a.dump_dir) / sb.model_tag);
  }
  std::printf("rho_mean %.6f over %zu sentences (k=%zu, grid %zux%zu)\n", report.rho_mean, report.n, report.k,
              report.grid.out, report.grid.in);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-level transformer and convtransformer translation toolkit"};
  app.require_subcommand(1);

  std::vector<std::string> bv_src, bv_tgt;
  std::string bv_out, bv_translit;
  std::size_t bv_min = 1;
  auto* bv = app.add_subcommand("build-vocab", "Build a shared character vocabulary");
  bv->add_option("--src", bv_src, "Source file (repeatable)")->required();
  bv->add_option("--tgt", bv_tgt, "Target file, paired with --src by position")->required();
  bv->add_option("--out", bv_out, "Vocabulary file to write")->required();
  bv->add_option("--translit", bv_translit, "Transliteration table applied to sources");
  bv->add_option("--min-count", bv_min, "Minimum character count")->check(CLI::PositiveNumber);

  std::string tr_config, tr_out;
  bool tr_resume = false;
  auto* tr = app.add_subcommand("train", "Train a model from a run config");
  tr->add_option("--config", tr_config, "Run config JSON")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_flag("--resume", tr_resume, "Continue from <out>/latest.ckpt when present");

  std::string tl_ckpt, tl_in, tl_out, tl_dump;
  int tl_beam = 1;
  double tl_alpha = 1.0;
  auto* tl = app.add_subcommand("translate", "Translate a file line by line");
  tl->add_option("--ckpt", tl_ckpt, "Checkpoint")->required();
  tl->add_option("--in", tl_in, "Source lines")->required();
  tl->add_option("--out", tl_out, "Hypothesis lines to write")->required();
  tl->add_option("--beam", tl_beam, "Beam size (1 = greedy)");
  tl->add_option("--length-penalty", tl_alpha, "Beam length penalty exponent");
  tl->add_option("--dump-attn", tl_dump, "Directory for per-sentence attention matrices");

  std::string sc_hyp, sc_ref, sc_tok = "whitespace";
  bool sc_smooth = false;
  auto* sc = app.add_subcommand("score", "Corpus BLEU of hypotheses against references");
  sc->add_option("--hyp", sc_hyp, "Hypothesis file")->required();
  sc->add_option("--ref", sc_ref, "Reference file")->required();
  sc->add_option("--tokenizer", sc_tok, "whitespace or char");
  sc->add_flag("--smooth", sc_smooth, "Add-one smoothing for orders above 1");

  AnalyzeArgs an_args;
  auto* an = app.add_subcommand("analyze", "CCA of cross-attention alignments between two checkpoints");
  an->add_option("--ckpt-a", an_args.ckpt_a, "First checkpoint")->required();
  an->add_option("--ckpt-b", an_args.ckpt_b, "Second checkpoint")->required();
  an->add_option("--src", an_args.src, "Source sentences")->required();
  an->add_option("--ref", an_args.ref, "Reference targets for teacher forcing")->required();
  an->add_option("--out", an_args.out, "Report CSV")->required();
  an->add_option("--n", an_args.n, "Sentences to sample");
  an->add_option("--k", an_args.k, "Canonical components averaged");
  an->add_option("--grid", an_args.grid, "Projection grid G_out G_in")->expected(2);
  an->add_option("--seed", an_args.seed, "Sampling seed")->each([&](const std::string&) { an_args.seed_set = true; });
  an->add_option("--lang", an_args.lang, "Test language tag for the report");
  an->add_option("--tag-a", an_args.tag_a, "Model tag for the first checkpoint");
  an->add_option("--tag-b", an_args.tag_b, "Model tag for the second checkpoint");
  an->add_option("--dump-attn", an_args.dump_dir, "Directory for per-sentence matrices");
  an->add_option("--config", an_args.config, "Run config whose analyze section supplies defaults");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*bv) return build_vocab_cmd(bv_src, bv_tgt, bv_out, bv_translit, bv_min);
    if (*tr) return train_cmd(tr_config, tr_out, tr_resume);
    if (*tl) return translate_cmd(tl_ckpt, tl_in, tl_out, tl_beam, tl_alpha, tl_dump);
    if (*sc) return score_cmd(sc_hyp, sc_ref, sc_tok, sc_smooth);
    if (*an) return analyze_cmd(an_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
