#include "charmt/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "charmt/json_fields.hpp"

namespace charmt {

void DecodeConfig::validate() const {
  std::vector<std::string> errors;
  if (strategy == DecodeStrategy::kBeam && beam_size < 2) errors.push_back("beam strategy needs beam_size >= 2");
  if (beam_size < 1) errors.push_back("beam_size must be >= 1");
  if (!(max_len_ratio >= 0.0)) errors.push_back("max_len_ratio must be >= 0");
  if (max_len_offset < 1) errors.push_back("max_len_offset must be >= 1");
  if (!(length_penalty >= 0.0)) errors.push_back("length_penalty must be >= 0");
  if (!errors.empty()) {
    std::string msg = "invalid decode config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
}

nlohmann::json to_json(const DecodeConfig& c) {
  return {{"strategy", c.strategy == DecodeStrategy::kBeam ? "beam" : "greedy"},
          {"beam_size", c.beam_size},
          {"max_len_ratio", c.max_len_ratio},
          {"max_len_offset", c.max_len_offset},
          {"length_penalty", c.length_penalty}};
}

DecodeConfig decode_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink) {
  std::vector<std::string> errors;
  DecodeConfig c;
  JsonFields f(j, "eval", errors);
  std::string strategy = "greedy";
  f.read("strategy", strategy);
  f.read("beam_size", c.beam_size);
  f.read("max_len_ratio", c.max_len_ratio);
  f.read("max_len_offset", c.max_len_offset);
  f.read("length_penalty", c.length_penalty);
  f.reject_unknown();
  if (strategy == "greedy") {
    c.strategy = DecodeStrategy::kGreedy;
  } else if (strategy == "beam") {
    c.strategy = DecodeStrategy::kBeam;
  } else {
    f.error("strategy", "expected greedy or beam, got '" + strategy + "'");
  }
  if (sink) {
    sink->insert(sink->end(), errors.begin(), errors.end());
    return c;
  }
  if (!errors.empty()) {
    std::string msg = "invalid decode config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return c;
}

std::size_t output_cap(std::size_t source_chars, const DecodeConfig& config, const Model& model) {
  const double raw = std::floor(config.max_len_ratio * static_cast<double>(source_chars)) + config.max_len_offset;
  const auto limit = static_cast<double>(model.config().max_len);
  return static_cast<std::size_t>(std::max(1.0, std::min(raw, limit)));
}

std::vector<double> generation_log_probs(std::span<const double> logits) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  double mx = kNegInf;
  for (std::size_t v = Vocabulary::kEos; v < logits.size(); ++v) mx = std::max(mx, logits[v]);
  double z = 0.0;
  for (std::size_t v = Vocabulary::kEos; v < logits.size(); ++v) z += std::exp(logits[v] - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size(), kNegInf);
  for (std::size_t v = Vocabulary::kEos; v < logits.size(); ++v) out[v] = logits[v] - lse;
  return out;
}

namespace {

std::int32_t argmax_lowest(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < scores.size(); ++v) {
    if (scores[v] > scores[best]) best = v;
  }
  return static_cast<std::int32_t>(best);
}

// Head mean of one row of a [rows, H, T_s] step attention, trimmed to the
// real source and renormalized.
std::vector<double> step_attention(const Tensor& cross, std::size_t row, std::size_t source_len) {
  const std::size_t H = cross.dim(1);
  const std::size_t Ts = cross.dim(2);
  const auto w = cross.data();
  std::vector<double> out(source_len, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t s = 0; s < source_len; ++s) out[s] += w[(row * H + h) * Ts + s];
  }
  double total = 0.0;
  for (double v : out) total += v;
  if (total > 0.0) {
    for (double& v : out) v /= total;
  }
  return out;
}

AttentionMap make_map(const std::vector<double>& rows, std::size_t source_len, const Model& model) {
  AttentionMap map;
  map.cols = source_len;
  map.rows = source_len ? rows.size() / source_len : 0;
  map.values = rows;
  map.layer = model.config().n_layers - 1;
  map.head = -1;
  map.source_len = source_len;
  map.target_len = map.rows;
  return map;
}

double normalized(double log_prob, std::size_t length, double penalty) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), penalty);
}

}  // namespace

std::vector<Hypothesis> greedy_decode_batch(const Model& model, std::span<const std::string> sources,
                                            const Vocabulary& vocab, const DecodeConfig& config) {
  if (sources.empty()) return {};
  const Batch batch = make_batch(sources, {}, vocab);
  IncrementalDecoder dec(model, batch);
  const std::size_t n = sources.size();
  std::vector<std::size_t> caps(n);
  std::vector<std::vector<double>> attention(n);
  for (std::size_t r = 0; r < n; ++r) caps[r] = output_cap(utf8_decode(sources[r]).size(), config, model);

  std::vector<Hypothesis> out(n);
  std::vector<std::size_t> active(n);
  for (std::size_t r = 0; r < n; ++r) active[r] = r;
  std::vector<std::int32_t> tokens(n, Vocabulary::kBos);
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  while (!active.empty()) {
    const std::vector<double> logits = dec.step(tokens);
    std::vector<std::size_t> keep_rows, next_active;
    std::vector<std::int32_t> next_tokens;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t r = active[i];
      const auto lp = generation_log_probs(std::span<const double>(logits).subspan(i * V, V));
      const std::int32_t tok = argmax_lowest(lp);
      out[r].ids.push_back(tok);
      out[r].log_prob += lp[static_cast<std::size_t>(tok)];
      const auto att = step_attention(dec.last_cross_attention(), i, batch.src_lengths[r]);
      attention[r].insert(attention[r].end(), att.begin(), att.end());
      if (tok != Vocabulary::kEos && out[r].ids.size() < caps[r]) {
        keep_rows.push_back(i);
        next_active.push_back(r);
        next_tokens.push_back(tok);
      }
    }
    if (next_active.empty()) break;
    if (next_active.size() != active.size()) dec.select_rows(keep_rows);
    active = std::move(next_active);
    tokens = std::move(next_tokens);
  }
  for (std::size_t r = 0; r < n; ++r) {
    out[r].text = vocab.decode(out[r].ids);
    out[r].attention = make_map(attention[r], batch.src_lengths[r], model);
  }
  return out;
}

Hypothesis greedy_decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                         const DecodeConfig& config) {
  const std::vector<std::string> one{source};
  return std::move(greedy_decode_batch(model, one, vocab, config).front());
}

Hypothesis beam_decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                       const DecodeConfig& config) {
  if (config.beam_size < 1) throw std::invalid_argument("beam_decode: beam_size must be >= 1");
  const auto K = static_cast<std::size_t>(config.beam_size);
  const std::vector<std::string> one{source};
  const Batch batch = make_batch(one, {}, vocab);
  const std::size_t source_len = batch.src_lengths[0];
  IncrementalDecoder dec(model, batch);
  const std::size_t cap = output_cap(utf8_decode(source).size(), config, model);
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  const double cap_norm = std::pow(static_cast<double>(cap), config.length_penalty);

  struct Beam {
    std::vector<std::int32_t> ids;
    double log_prob = 0.0;
    std::vector<double> attention;
  };
  struct Candidate {
    double score;
    double step_log_prob;
    std::size_t beam;
    std::int32_t token;
  };
  std::vector<Beam> live(1);
  std::vector<Beam> finished;
  std::vector<std::int32_t> tokens{Vocabulary::kBos};
  double best_finished = -std::numeric_limits<double>::infinity();

  for (std::size_t step = 0; step < cap && !live.empty(); ++step) {
    const std::vector<double> logits = dec.step(tokens);
    std::vector<Candidate> candidates;
    std::vector<std::vector<double>> log_probs(live.size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      log_probs[b] = generation_log_probs(std::span<const double>(logits).subspan(b * V, V));
      for (std::size_t v = Vocabulary::kEos; v < V; ++v) {
        candidates.push_back(
            {live[b].log_prob + log_probs[b][v], log_probs[b][v], b, static_cast<std::int32_t>(v)});
      }
    }
    // Sums that round to a tie fall back to the step score, so a single beam
    // picks exactly what greedy picks.
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.step_log_prob > b.step_log_prob;
    });
    candidates.resize(std::min(K, candidates.size()));

    std::vector<Beam> next;
    std::vector<std::size_t> rows;
    std::vector<std::int32_t> next_tokens;
    for (const Candidate& c : candidates) {
      Beam beam = live[c.beam];
      beam.ids.push_back(c.token);
      beam.log_prob = c.score;
      const auto att = step_attention(dec.last_cross_attention(), c.beam, source_len);
      beam.attention.insert(beam.attention.end(), att.begin(), att.end());
      if (c.token == Vocabulary::kEos || step + 1 == cap) {
        best_finished = std::max(best_finished, normalized(beam.log_prob, beam.ids.size(), config.length_penalty));
        finished.push_back(std::move(beam));
      } else {
        rows.push_back(c.beam);
        next_tokens.push_back(c.token);
        next.push_back(std::move(beam));
      }
    }
    // A live beam can at best keep its log probability and reach the cap.
    const bool can_improve = std::any_of(next.begin(), next.end(), [&](const Beam& b) {
      return b.log_prob / cap_norm > best_finished;
    });
    if (!can_improve) break;
    dec.select_rows(rows);
    live = std::move(next);
    tokens = std::move(next_tokens);
  }

  const Beam* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const Beam& b : finished) {
    const double s = normalized(b.log_prob, b.ids.size(), config.length_penalty);
    if (!best || s > best_score) {
      best = &b;
      best_score = s;
    }
  }
  Hypothesis h;
  h.ids = best->ids;
  h.log_prob = best->log_prob;
  h.text = vocab.decode(h.ids);
  h.attention = make_map(best->attention, source_len, model);
  return h;
}

Hypothesis decode(const Model& model, const std::string& source, const Vocabulary& vocab,
                  const DecodeConfig& config) {
  if (config.strategy == DecodeStrategy::kBeam) return beam_decode(model, source, vocab, config);
  return greedy_decode(model, source, vocab, config);
}

}  // namespace charmt
