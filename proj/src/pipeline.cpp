#include "charmt/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

namespace charmt {

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Keeps the header and the rows whose first column is at most `limit`.
std::string truncate_csv(const std::string& text, std::uint64_t limit) {
  std::istringstream in(text);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || std::stoull(line.substr(0, line.find(','))) <= limit) out += line + "\n";
    header = false;
  }
  return out;
}

}  // namespace

PreparedData prepare_data(const RunConfig& config) {
  const DataConfig& d = config.data;
  if (d.train.empty()) throw std::invalid_argument("data.train lists no corpora");
  PreparedData out;
  std::optional<TransliterationTable> table;
  if (!d.translit.empty()) {
    out.translit_tsv = read_file(d.translit);
    table = TransliterationTable::from_tsv(out.translit_tsv, d.translit_separator);
  }
  auto load = [&](const CorpusFiles& f) {
    ParallelCorpus c = load_parallel_corpus(f.source, f.target, f.language);
    return table ? transliterate_sources(c, *table) : c;
  };
  std::vector<ParallelCorpus> parts;
  for (const auto& f : d.train) parts.push_back(load(f));
  out.train = mix_corpora(parts, mix_seed(config.train.seed, hash_string("mix")));
  for (std::size_t i = 0; i < d.valid.size(); ++i) {
    const std::string name = d.valid[i].language.empty() ? "valid" + std::to_string(i) : d.valid[i].language;
    out.valid.push_back({name, load(d.valid[i])});
  }
  out.vocab = d.vocab.empty() ? build_vocab(parts, d.min_count) : Vocabulary::load(d.vocab);
  return out;
}

RunConfig resolve_config(RunConfig config, const Vocabulary& vocab) {
  const int size = static_cast<int>(vocab.size());
  if (config.model.vocab_size != 0 && config.model.vocab_size != size) {
    throw std::invalid_argument("model.vocab_size is " + std::to_string(config.model.vocab_size) +
                                " but the vocabulary has " + std::to_string(size) + " entries");
  }
  config.model.vocab_size = size;
  config.model.validate();
  return config;
}

std::string epochs_csv(const TrainLog& log) {
  std::string out = "epoch,step,train_loss,val_loss,val_bleu";
  if (!log.epochs.empty()) {
    for (const auto& s : log.epochs.front().per_set) out += ",loss_" + s.name + ",bleu_" + s.name;
  }
  out += "\n";
  for (const auto& e : log.epochs) {
    out += std::to_string(e.epoch) + "," + std::to_string(e.step) + "," + fmt(e.train_loss) + "," + fmt(e.val_loss) +
           "," + fmt(e.val_bleu);
    for (const auto& s : e.per_set) out += "," + fmt(s.loss) + "," + fmt(s.bleu);
    out += "\n";
  }
  return out;
}

TrainOutcome train_run(const RunConfig& config, const std::filesystem::path& out_dir, bool resume,
                       std::ostream* progress) {
  PreparedData data = prepare_data(config);
  TrainOutcome outcome;
  outcome.resolved = resolve_config(config, data.vocab);
  const RunConfig& rc = outcome.resolved;
  std::filesystem::create_directories(out_dir);
  outcome.latest = out_dir / "latest.ckpt";
  outcome.best = out_dir / "best.ckpt";
  const auto log_path = out_dir / "train_log.csv";
  const auto epochs_path = out_dir / "epochs.csv";

  Model model(rc.model, rc.train.seed);
  std::optional<OptimizerState> restored;
  std::string previous_steps, previous_epochs;
  outcome.best_bleu = -1.0;
  if (resume && std::filesystem::exists(outcome.latest)) {
    Checkpoint ck = load_checkpoint(outcome.latest, &rc.model);
    if (!(ck.vocab == data.vocab)) throw std::runtime_error("latest.ckpt was trained with a different vocabulary");
    if (!ck.has_optimizer) throw std::runtime_error("latest.ckpt has no optimizer state to resume from");
    model = ck.make_model();
    restored = ck.optimizer;
    outcome.best_bleu = ck.extra.value("best_bleu", -1.0);
    outcome.best_epoch = ck.extra.value("best_epoch", 0);
    if (std::filesystem::exists(log_path)) previous_steps = truncate_csv(read_file(log_path), ck.step);
    if (std::filesystem::exists(epochs_path)) {
      previous_epochs = truncate_csv(read_file(epochs_path), static_cast<std::uint64_t>(ck.epoch));
    }
  }

  write_file(out_dir / "config.json", to_json(rc).dump(2) + "\n");
  data.vocab.save(out_dir / "vocab.txt");

  nlohmann::json extra = {{"translit", data.translit_tsv},
                          {"translit_separator", rc.data.translit_separator},
                          {"best_bleu", outcome.best_bleu},
                          {"best_epoch", outcome.best_epoch}};
  Trainer trainer(model, data.vocab, data.train, data.valid, rc.train, rc.eval);
  if (restored) trainer.resume(*restored);

  auto write_logs = [&](const TrainLog& log) {
    std::string steps = log.to_csv();
    if (!previous_steps.empty()) steps = previous_steps + log.csv_rows();
    write_file(log_path, steps);
    std::string epochs = epochs_csv(log);
    if (!previous_epochs.empty()) epochs = previous_epochs + epochs.substr(epochs.find('\n') + 1);
    write_file(epochs_path, epochs);
  };

  if (!restored) {
    save_checkpoint(outcome.latest, model, data.vocab, &trainer.optimizer(), 0, extra);
    write_logs({});
  }
  if (!std::filesystem::exists(outcome.best)) save_checkpoint(outcome.best, model, data.vocab, nullptr, 0, extra);

  outcome.log = trainer.run([&](const Trainer& t, const EpochRecord& rec) {
    const int epoch = rec.epoch;
    const double score = std::isnan(rec.val_bleu) ? 0.0 : rec.val_bleu;
    if (score > outcome.best_bleu) {
      outcome.best_bleu = score;
      outcome.best_epoch = epoch;
      extra["best_bleu"] = outcome.best_bleu;
      extra["best_epoch"] = outcome.best_epoch;
      save_checkpoint(outcome.best, t.model(), data.vocab, nullptr, epoch, extra);
    }
    save_checkpoint(outcome.latest, t.model(), data.vocab, &t.optimizer(), epoch, extra);
    write_logs(t.log());
    if (progress) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %d step %llu train_loss %.4f val_loss %.4f val_bleu %.2f", epoch,
                    static_cast<unsigned long long>(rec.step), rec.train_loss, rec.val_loss, rec.val_bleu);
      *progress << line << std::endl;
    }
  });
  write_logs(outcome.log);
  if (outcome.best_bleu < 0.0) outcome.best_bleu = 0.0;
  return outcome;
}

LoadedModel::LoadedModel(const std::filesystem::path& path)
    : checkpoint(load_checkpoint(path)), model(checkpoint.make_model()) {
  const std::string tsv = checkpoint.extra.value("translit", std::string());
  if (!tsv.empty()) {
    translit = TransliterationTable::from_tsv(tsv, checkpoint.extra.value("translit_separator", std::string("|")));
  }
}

std::string LoadedModel::prepare_source(const std::string& line) const {
  return translit ? translit->apply(line) : line;
}

std::size_t LoadedModel::unknown_characters(std::span<const std::string> lines) const {
  std::size_t unknown = 0;
  for (const auto& l : lines) {
    for (char32_t c : utf8_decode(nfc_normalize(l))) unknown += !checkpoint.vocab.contains(c);
  }
  return unknown;
}

std::vector<Hypothesis> translate_lines(const Model& model, const Vocabulary& vocab,
                                        std::span<const std::string> sources, const DecodeConfig& config,
                                        std::size_t batch) {
  std::vector<Hypothesis> out;
  out.reserve(sources.size());
  if (config.strategy == DecodeStrategy::kGreedy) {
    for (std::size_t i = 0; i < sources.size(); i += batch) {
      const auto chunk = sources.subspan(i, std::min(batch, sources.size() - i));
      auto hyps = greedy_decode_batch(model, chunk, vocab, config);
      for (auto& h : hyps) out.push_back(std::move(h));
    }
  } else {
    for (const auto& s : sources) out.push_back(beam_decode(model, s, vocab, config));
  }
  return out;
}

}  // namespace charmt
