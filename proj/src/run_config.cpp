#include "charmt/run_config.hpp"

#include <fstream>

#include "charmt/json_fields.hpp"

namespace charmt {

namespace {

nlohmann::json corpus_list_json(const std::vector<CorpusFiles>& list) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : list) {
    out.push_back({{"language", c.language}, {"source", c.source.string()}, {"target", c.target.string()}});
  }
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

std::vector<CorpusFiles> read_corpus_list(const nlohmann::json& j, const std::string& section,
                                          const std::filesystem::path& base, std::vector<std::string>& errors) {
  std::vector<CorpusFiles> out;
  if (!j.is_array()) {
    errors.push_back(section + ": expected an array");
    return out;
  }
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string name = section + "[" + std::to_string(i) + "]";
    JsonFields f(j[i], name, errors);
    std::string language, source, target;
    f.read("language", language);
    f.read("source", source);
    f.read("target", target);
    f.reject_unknown();
    if (j[i].is_object()) {
      if (source.empty()) f.error("source", "required");
      if (target.empty()) f.error("target", "required");
    }
    out.push_back({language, resolve(base, source), resolve(base, target)});
  }
  return out;
}

// Runs a section parser that throws an aggregated message and folds its
// lines into the shared list.
template <typename F>
void collect(std::vector<std::string>& errors, F&& parse, const std::string& prefix = "") {
  try {
    parse();
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    const auto nl = msg.find('\n');
    if (nl == std::string::npos) {
      errors.push_back(msg);
      return;
    }
    std::size_t pos = nl + 1;
    while (pos < msg.size()) {
      auto end = msg.find('\n', pos);
      if (end == std::string::npos) end = msg.size();
      std::string line = msg.substr(pos, end - pos);
      line.erase(0, line.find_first_not_of(' '));
      errors.push_back(prefix + line);
      pos = end + 1;
    }
  }
}

}  // namespace

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json model = to_json(c.model);
  return {{"model", model},
          {"train", to_json(c.train)},
          {"data",
           {{"train", corpus_list_json(c.data.train)},
            {"valid", corpus_list_json(c.data.valid)},
            {"vocab", c.data.vocab.string()},
            {"translit", c.data.translit.string()},
            {"translit_separator", c.data.translit_separator},
            {"min_count", c.data.min_count}}},
          {"eval", to_json(c.eval)},
          {"analyze",
           {{"n", c.analyze.n},
            {"grid", {c.analyze.grid.out, c.analyze.grid.in}},
            {"k", c.analyze.k},
            {"reg", c.analyze.reg},
            {"seed", c.analyze.seed}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  std::vector<std::string> errors;
  RunConfig c;
  JsonFields top(j, "", errors);
  if (const auto* s = top.section("model")) c.model = model_config_from_json(*s, &errors);
  if (const auto* s = top.section("train")) c.train = train_config_from_json(*s, &errors);
  if (const auto* s = top.section("eval")) c.eval = decode_config_from_json(*s, &errors);
  if (const auto* s = top.section("data")) {
    JsonFields f(*s, "data", errors);
    std::string vocab, translit;
    if (const auto* t = f.section("train")) c.data.train = read_corpus_list(*t, "data.train", base_dir, errors);
    if (const auto* v = f.section("valid")) c.data.valid = read_corpus_list(*v, "data.valid", base_dir, errors);
    f.read("vocab", vocab);
    f.read("translit", translit);
    f.read("translit_separator", c.data.translit_separator);
    f.read("min_count", c.data.min_count);
    f.reject_unknown();
    c.data.vocab = resolve(base_dir, vocab);
    c.data.translit = resolve(base_dir, translit);
    if (c.data.min_count < 1) f.error("min_count", "must be >= 1");
  }
  if (const auto* s = top.section("analyze")) {
    JsonFields f(*s, "analyze", errors);
    std::vector<std::size_t> grid{c.analyze.grid.out, c.analyze.grid.in};
    f.read("n", c.analyze.n);
    f.read("grid", grid);
    f.read("k", c.analyze.k);
    f.read("reg", c.analyze.reg);
    f.read("seed", c.analyze.seed);
    f.reject_unknown();
    if (grid.size() != 2 || grid[0] < 1 || grid[1] < 1) {
      f.error("grid", "expected [G_out, G_in] with both >= 1");
    } else {
      c.analyze.grid = {grid[0], grid[1]};
    }
    if (c.analyze.n < 1) f.error("n", "must be >= 1");
    if (c.analyze.k < 1) f.error("k", "must be >= 1");
    if (!(c.analyze.reg > 0.0)) f.error("reg", "must be > 0");
  }
  top.reject_unknown();
  // vocab_size 0 means "take it from the vocabulary"; everything else is
  // checked now.
  ModelConfig probe = c.model;
  if (probe.vocab_size == 0) probe.vocab_size = Vocabulary::kReserved + 1;
  collect(errors, [&] { probe.validate(); }, "model.");
  collect(errors, [&] { c.train.validate(); }, "train.");
  collect(errors, [&] { c.eval.validate(); }, "eval.");
  if (!errors.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

}  // namespace charmt
