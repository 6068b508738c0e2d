#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "charmt/bleu.hpp"
#include "charmt/decode.hpp"
#include "charmt/model.hpp"
#include "charmt/text.hpp"
#include "json.hpp"

namespace charmt {

/// Mean over unmasked positions of -sum_v q_v log p_v with
/// q = (1 - alpha) * onehot(target) + alpha / V. logits: [B, T, V].
Tensor masked_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                            std::span<const std::uint8_t> mask, double label_smoothing = 0.1);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  /// Zero moments shaped like params.
  static OptimizerState for_params(const ParameterSet& params, AdamConfig config = {});
};

/// Thrown when a gradient or loss is not finite; nothing has been modified.
class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam update using each parameter's gradient (absent
/// gradients count as zero).
void adam_step(ParameterSet& params, OptimizerState& state, double lr);

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
double lr_at_step(std::uint64_t step, int d_model, int warmup);

double grad_norm(const ParameterSet& params);
/// Rescales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

struct TrainConfig {
  int epochs = 10;
  std::size_t max_tokens = 4096;
  int warmup = 400;
  std::uint64_t seed = 1;
  double label_smoothing = 0.1;
  /// Multiplies the schedule.
  double lr_scale = 1.0;
  /// 0 disables clipping.
  double clip_norm = 1.0;
  /// Stops after this many optimizer steps in total; 0 means no limit.
  std::uint64_t max_steps = 0;
  /// Wall-clock seconds in the log; off keeps logs byte-identical across runs.
  bool record_time = false;
  BleuTokenizer bleu_tokenizer = BleuTokenizer::kWhitespace;
  /// Sentences per decoding batch during validation.
  std::size_t eval_batch = 64;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
/// With `sink` given, problems are appended to it and the partially read
/// config is returned instead of throwing.
TrainConfig train_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink = nullptr);

struct ValidationSet {
  std::string name;
  ParallelCorpus corpus;
};

struct StepRecord {
  std::uint64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct ValidationScore {
  std::string name;
  double loss = 0.0;
  double bleu = 0.0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::uint64_t step = 0;
  double train_loss = 0.0;
  /// Over all validation sets pooled; NaN when there is no validation data.
  double val_loss = 0.0;
  double val_bleu = 0.0;
  std::vector<ValidationScore> per_set;
  double seconds = 0.0;
};

/// Append-only record of a run. The CSV has one row per step; the last step
/// of each epoch also carries the validation columns.
struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;

  static constexpr const char* kCsvHeader = "step,epoch,loss,val_loss,val_bleu,seconds";
  std::string csv_rows() const;
  std::string to_csv() const { return std::string(kCsvHeader) + "\n" + csv_rows(); }
  void write_csv(const std::filesystem::path& path) const;
};

/// Teacher-forced loss over a corpus without dropout or gradients.
double corpus_loss(const Model& model, const ParallelCorpus& corpus, const Vocabulary& vocab,
                   std::size_t max_tokens, double label_smoothing);

class Trainer {
 public:
  using EpochCallback = std::function<void(const Trainer&, const EpochRecord&)>;

  Trainer(Model& model, Vocabulary vocab, ParallelCorpus train, std::vector<ValidationSet> validation,
          TrainConfig config, DecodeConfig eval = {});

  /// Continues from a saved optimizer state; its step decides where in the
  /// epoch sequence training resumes.
  void resume(OptimizerState state);

  /// Trains until config.epochs are complete or max_steps is reached. The
  /// callback runs after each completed epoch's validation. Throws
  /// NonFiniteGradient on a non-finite loss or gradient before touching the
  /// parameters of that step.
  TrainLog run(const EpochCallback& on_epoch = {});
  /// The log of the current (or last) run so far.
  const TrainLog& log() const { return log_; }

  /// One optimizer step on a batch; returns its loss.
  double train_step(const Batch& batch);
  EpochRecord evaluate(int epoch) const;

  const Model& model() const { return model_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  const TrainConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::uint64_t step() const { return optimizer_.step; }
  /// Batches for a (0-based) epoch; a pure function of the seed and epoch.
  std::vector<Batch> epoch_batches(int epoch) const;

 private:
  Model& model_;
  Vocabulary vocab_;
  ParallelCorpus train_;
  std::vector<ValidationSet> validation_;
  TrainConfig config_;
  DecodeConfig eval_;
  OptimizerState optimizer_;
  TrainLog log_;
};

// ---- Checkpoints ---------------------------------------------------------

enum class StorageType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  ParameterSet params;
  bool has_optimizer = false;
  OptimizerState optimizer;
  std::uint64_t step = 0;
  int epoch = 0;
  nlohmann::json extra = nlohmann::json::object();

  Model make_model() const { return Model(config, params); }
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Written to a temporary file and renamed, so an existing checkpoint is
/// only replaced by a complete one.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const OptimizerState* optimizer, int epoch, const nlohmann::json& extra = nlohmann::json::object(),
                     StorageType storage = StorageType::kFloat64);

/// With `expected` set, a differing d_model (or layout) is an error.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace charmt
