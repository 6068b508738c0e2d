#include "charmt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "charmt/json_fields.hpp"

namespace charmt {

// ---- Loss ----------------------------------------------------------------

Tensor masked_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask, double label_smoothing) {
  if (logits.rank() < 1) throw ShapeError("masked_cross_entropy: logits need a vocabulary axis");
  const std::size_t V = logits.dim(-1);
  const std::size_t N = logits.numel() / V;
  if (targets.size() != N || mask.size() != N) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(N) + " positions but " +
                     std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw std::invalid_argument("masked_cross_entropy: label smoothing must be in [0, 1)");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw std::out_of_range("masked_cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary of " +
                              std::to_string(V));
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("masked_cross_entropy: all positions are padding");

  const double off = label_smoothing / static_cast<double>(V);
  const double on = 1.0 - label_smoothing + off;
  const auto x = logits.data();
  auto probs = std::make_shared<std::vector<double>>(N * V, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!mask[i]) continue;
    const double* row = x.data() + i * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    const double lse = mx + std::log(z);
    double sum_logp = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double logp = row[v] - lse;
      (*probs)[i * V + v] = std::exp(logp);
      sum_logp += logp;
    }
    const double target_logp = row[static_cast<std::size_t>(targets[i])] - lse;
    total -= (1.0 - label_smoothing) * target_logp + off * sum_logp;
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result(
      OpId::kCrossEntropy, Shape{}, {total * inv_count}, {&logits},
      [probs, tg = std::move(tg), mk = std::move(mk), V, N, inv_count, on, off](
          TensorImpl& out, std::span<const std::shared_ptr<TensorImpl>> in) {
        if (!in[0]->requires_grad) return;
        const double g = out.grad[0] * inv_count;
        auto& gx = in[0]->grad;
        for (std::size_t i = 0; i < N; ++i) {
          if (!mk[i]) continue;
          const auto t = static_cast<std::size_t>(tg[i]);
          for (std::size_t v = 0; v < V; ++v) {
            const double q = v == t ? on : off;
            gx[i * V + v] += g * ((*probs)[i * V + v] - q);
          }
        }
      });
}

// ---- Optimizer -----------------------------------------------------------

OptimizerState OptimizerState::for_params(const ParameterSet& params, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  for (const auto& [name, t] : params) {
    s.m[name].assign(t.numel(), 0.0);
    s.v[name].assign(t.numel(), 0.0);
  }
  return s;
}

void adam_step(ParameterSet& params, OptimizerState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be > 0");
  for (const auto& [name, t] : params) {
    auto m = state.m.find(name);
    auto v = state.v.find(name);
    if (m == state.m.end() || v == state.v.end() || m->second.size() != t.numel() || v->second.size() != t.numel()) {
      throw std::invalid_argument("adam_step: optimizer state does not match parameter " + name);
    }
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient for parameter " + name);
    }
  }
  const AdamConfig& c = state.config;
  const auto step = static_cast<double>(state.step + 1);
  const double correction1 = 1.0 - std::pow(c.beta1, step);
  const double correction2 = 1.0 - std::pow(c.beta2, step);
  for (auto& [name, t] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    auto p = t.mutable_data();
    const bool has = t.has_grad();
    const std::span<const double> g = has ? t.grad() : std::span<const double>();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
  ++state.step;
}

double lr_at_step(std::uint64_t step, int d_model, int warmup) {
  if (step < 1) throw std::invalid_argument("lr_at_step: step must be >= 1");
  if (warmup < 1) throw std::invalid_argument("lr_at_step: warmup must be >= 1");
  const auto s = static_cast<double>(step);
  const auto w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

double grad_norm(const ParameterSet& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const double factor = max_norm / norm;
    for (auto& [name, t] : params) {
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---- Config --------------------------------------------------------------

void TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (epochs < 0) errors.push_back("epochs must be >= 0");
  if (max_tokens < 1) errors.push_back("max_tokens must be >= 1");
  if (warmup < 1) errors.push_back("warmup must be >= 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) errors.push_back("label_smoothing must be in [0, 1)");
  if (!(lr_scale > 0.0)) errors.push_back("lr_scale must be > 0");
  if (!(clip_norm >= 0.0)) errors.push_back("clip_norm must be >= 0");
  if (eval_batch < 1) errors.push_back("eval_batch must be >= 1");
  if (!errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"max_tokens", c.max_tokens},
          {"warmup", c.warmup},
          {"seed", c.seed},
          {"label_smoothing", c.label_smoothing},
          {"lr_scale", c.lr_scale},
          {"clip_norm", c.clip_norm},
          {"max_steps", c.max_steps},
          {"record_time", c.record_time},
          {"bleu_tokenizer", to_string(c.bleu_tokenizer)},
          {"eval_batch", c.eval_batch}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink) {
  std::vector<std::string> errors;
  TrainConfig c;
  JsonFields f(j, "train", errors);
  std::string tokenizer = to_string(c.bleu_tokenizer);
  f.read("epochs", c.epochs);
  f.read("max_tokens", c.max_tokens);
  f.read("warmup", c.warmup);
  f.read("seed", c.seed);
  f.read("label_smoothing", c.label_smoothing);
  f.read("lr_scale", c.lr_scale);
  f.read("clip_norm", c.clip_norm);
  f.read("max_steps", c.max_steps);
  f.read("record_time", c.record_time);
  f.read("bleu_tokenizer", tokenizer);
  f.read("eval_batch", c.eval_batch);
  f.reject_unknown();
  try {
    c.bleu_tokenizer = bleu_tokenizer_from_string(tokenizer);
  } catch (const std::invalid_argument& e) {
    f.error("bleu_tokenizer", e.what());
  }
  if (sink) {
    sink->insert(sink->end(), errors.begin(), errors.end());
    return c;
  }
  if (!errors.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return c;
}

// ---- Log -----------------------------------------------------------------

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string TrainLog::csv_rows() const {
  std::string out;
  std::size_t next_epoch = 0;
  for (const StepRecord& s : steps) {
    std::string val_loss, val_bleu;
    double seconds = s.seconds;
    while (next_epoch < epochs.size() && epochs[next_epoch].step < s.step) ++next_epoch;
    if (next_epoch < epochs.size() && epochs[next_epoch].step == s.step) {
      val_loss = num(epochs[next_epoch].val_loss);
      val_bleu = num(epochs[next_epoch].val_bleu);
      seconds = epochs[next_epoch].seconds;
    }
    out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + num(s.loss) + "," + val_loss + "," +
           val_bleu + "," + num(seconds) + "\n";
  }
  return out;
}

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---- Evaluation ----------------------------------------------------------

namespace {

struct LossSum {
  double total = 0.0;
  std::size_t tokens = 0;
};

LossSum corpus_loss_sum(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                        std::size_t max_tokens, double label_smoothing) {
  NoGradGuard no_grad;
  LossSum s;
  for (const Batch& b : make_batches(corpus, vocab, max_tokens, 0)) {
    const Tensor logits = model_forward(model, b).logits;
    const std::size_t n = b.tgt_tokens();
    s.total += masked_cross_entropy(logits, b.tgt_out_ids, b.tgt_mask, label_smoothing).item() * static_cast<double>(n);
    s.tokens += n;
  }
  return s;
}

// Greedy hypotheses in corpus order, decoded in length-sorted chunks.
std::vector<std::string> translate_corpus(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                                          const DecodeConfig& eval, std::size_t chunk) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.pairs[a].source.size() < corpus.pairs[b].source.size();
  });
  std::vector<std::string> hyps(corpus.size());
  for (std::size_t start = 0; start < order.size(); start += chunk) {
    const std::size_t end = std::min(order.size(), start + chunk);
    std::vector<std::string> sources;
    for (std::size_t i = start; i < end; ++i) sources.push_back(corpus.pairs[order[i]].source);
    auto out = greedy_decode_batch(model, sources, vocab, eval);
    for (std::size_t i = start; i < end; ++i) hyps[order[i]] = std::move(out[i - start].text);
  }
  return hyps;
}

}  // namespace

double corpus_loss(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab, std::size_t max_tokens,
                   double label_smoothing) {
  const LossSum s = corpus_loss_sum(model, corpus, vocab, max_tokens, label_smoothing);
  return s.total / static_cast<double>(s.tokens);
}

// ---- Trainer -------------------------------------------------------------

Trainer::Trainer(Model& model, Vocabulary vocab, ParallelCorpus train, std::vector<ValidationSet> validation,
                 TrainConfig config, DecodeConfig eval)
    : model_(model),
      vocab_(std::move(vocab)),
      train_(std::move(train)),
      validation_(std::move(validation)),
      config_(config),
      eval_(eval),
      optimizer_(OptimizerState::for_params(model.params())) {
  config_.validate();
  if (train_.size() == 0) throw std::invalid_argument("training corpus is empty");
  if (static_cast<int>(vocab_.size()) != model_.config().vocab_size) {
    throw std::invalid_argument("vocabulary has " + std::to_string(vocab_.size()) + " entries, model expects " +
                                std::to_string(model_.config().vocab_size));
  }
}

void Trainer::resume(OptimizerState state) {
  const OptimizerState fresh = OptimizerState::for_params(model_.params());
  for (const auto& [name, m] : fresh.m) {
    if (!state.m.count(name) || state.m.at(name).size() != m.size() || !state.v.count(name) ||
        state.v.at(name).size() != m.size()) {
      throw std::invalid_argument("optimizer state does not match parameter " + name);
    }
  }
  optimizer_ = std::move(state);
}

std::vector<Batch> Trainer::epoch_batches(int epoch) const {
  return make_batches(train_, vocab_, config_.max_tokens, mix_seed(config_.seed, static_cast<std::uint64_t>(epoch)));
}

double Trainer::train_step(const Batch& batch) {
  ParameterSet& params = model_.params();
  params.zero_grad();
  const std::uint64_t next = optimizer_.step + 1;
  Rng rng(mix_seed(mix_seed(config_.seed, hash_string("dropout")), next));
  double loss_value = 0.0;
  try {
    const Tensor logits = model_forward(model_, batch, ForwardOptions{true, &rng}).logits;
    const Tensor loss = masked_cross_entropy(logits, batch.tgt_out_ids, batch.tgt_mask, config_.label_smoothing);
    loss_value = loss.item();
    backward(loss);
    if (config_.clip_norm > 0.0) clip_grad_norm(params, config_.clip_norm);
    const double lr = config_.lr_scale * lr_at_step(next, model_.config().d_model, config_.warmup);
    adam_step(params, optimizer_, lr);
  } catch (const NonFiniteError& e) {
    params.zero_grad();
    throw NonFiniteGradient(std::string("training step ") + std::to_string(next) + ": " + e.what());
  } catch (const NonFiniteGradient& e) {
    params.zero_grad();
    throw NonFiniteGradient(std::string("training step ") + std::to_string(next) + ": " + e.what());
  }
  params.zero_grad();
  return loss_value;
}

EpochRecord Trainer::evaluate(int epoch) const {
  EpochRecord rec;
  rec.epoch = epoch;
  rec.step = optimizer_.step;
  rec.val_loss = std::numeric_limits<double>::quiet_NaN();
  rec.val_bleu = std::numeric_limits<double>::quiet_NaN();
  if (validation_.empty()) return rec;
  BleuOptions bleu;
  bleu.tokenizer = config_.bleu_tokenizer;
  LossSum pooled_loss;
  BleuStats pooled;
  pooled.matches.assign(static_cast<std::size_t>(bleu.max_order), 0);
  pooled.totals.assign(static_cast<std::size_t>(bleu.max_order), 0);
  for (const ValidationSet& set : validation_) {
    const LossSum loss = corpus_loss_sum(model_, set.corpus, vocab_, config_.max_tokens, 0.0);
    const auto hyps = translate_corpus(model_, set.corpus, vocab_, eval_, config_.eval_batch);
    std::vector<std::string> refs;
    for (const auto& p : set.corpus.pairs) refs.push_back(p.target);
    const BleuStats stats = bleu_stats(hyps, refs, bleu);
    rec.per_set.push_back({set.name, loss.total / static_cast<double>(loss.tokens), bleu_from_stats(stats, bleu)});
    pooled_loss.total += loss.total;
    pooled_loss.tokens += loss.tokens;
    for (std::size_t n = 0; n < pooled.matches.size(); ++n) {
      pooled.matches[n] += stats.matches[n];
      pooled.totals[n] += stats.totals[n];
    }
    pooled.hyp_length += stats.hyp_length;
    pooled.ref_length += stats.ref_length;
  }
  rec.val_loss = pooled_loss.total / static_cast<double>(pooled_loss.tokens);
  rec.val_bleu = bleu_from_stats(pooled, bleu);
  return rec;
}

TrainLog Trainer::run(const EpochCallback& on_epoch) {
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    if (!config_.record_time) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  auto limit_reached = [&] { return config_.max_steps != 0 && optimizer_.step >= config_.max_steps; };

  log_ = {};
  // Locate the resume point: whole epochs already done, then the offset.
  int epoch = 0;
  std::uint64_t skip = optimizer_.step;
  std::vector<Batch> batches;
  int loaded = -1;
  while (epoch < config_.epochs) {
    batches = epoch_batches(epoch);
    loaded = epoch;
    if (skip < batches.size()) break;
    skip -= batches.size();
    ++epoch;
  }
  for (; epoch < config_.epochs; ++epoch) {
    if (limit_reached()) break;
    if (loaded != epoch) {
      batches = epoch_batches(epoch);
      loaded = epoch;
    }
    double loss_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = static_cast<std::size_t>(skip); i < batches.size(); ++i) {
      if (limit_reached()) return log_;
      const double loss = train_step(batches[i]);
      const double lr = config_.lr_scale * lr_at_step(optimizer_.step, model_.config().d_model, config_.warmup);
      log_.steps.push_back({optimizer_.step, epoch + 1, loss, lr, elapsed()});
      loss_sum += loss;
      ++n;
    }
    skip = 0;
    EpochRecord rec = evaluate(epoch + 1);
    rec.train_loss = n ? loss_sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
    rec.seconds = elapsed();
    log_.epochs.push_back(rec);
    if (on_epoch) on_epoch(*this, rec);
  }
  return log_;
}

}  // namespace charmt
