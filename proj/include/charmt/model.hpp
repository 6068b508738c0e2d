#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "charmt/ops.hpp"
#include "charmt/parameters.hpp"
#include "charmt/text.hpp"
#include "json.hpp"

namespace charmt {

enum class EncoderKind { kStandard, kConv };

std::string to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& name);

struct ModelConfig {
  EncoderKind encoder_kind = EncoderKind::kStandard;
  int n_layers = 6;
  int n_heads = 8;
  int d_model = 512;
  int d_ff = 2048;
  std::vector<int> conv_windows{3, 5, 7};
  int fuse_window = 3;
  double dropout = 0.1;
  int max_len = 512;
  int vocab_size = 0;

  /// Throws std::invalid_argument listing every violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
/// Unknown keys are rejected; absent keys keep their defaults.
/// With `sink` given, problems are appended to it and the partially read
/// config is returned instead of throwing.
ModelConfig model_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink = nullptr);

/// Attention probabilities for one sentence. head == -1 marks a head average.
struct AttentionMap {
  std::size_t rows = 0;  // target positions
  std::size_t cols = 0;  // source positions
  std::vector<double> values;
  int layer = 0;
  int head = -1;
  std::size_t source_len = 0;
  std::size_t target_len = 0;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct ForwardOptions {
  bool training = false;
  /// Dropout source; required when training with dropout > 0.
  Rng* rng = nullptr;
};

/// Parameters plus architecture. Parameter i is initialized from a seed
/// derived from (seed, name), so models that share parameter names share
/// their initial values regardless of encoder kind.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  const Tensor& param(const std::string& name) const { return params_.at(name); }
  const Tensor& positions() const { return positions_; }

 private:
  ModelConfig config_;
  ParameterSet params_;
  Tensor positions_;
};

/// Parameter names and shapes for a configuration, in sorted order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);
/// Closed-form scalar count for a configuration.
std::size_t closed_form_parameter_count(const ModelConfig& config);
/// Scalars added to one encoder layer by the conv sub-block.
std::size_t conv_sub_block_parameter_count(const ModelConfig& config);

Tensor sinusoidal_positions(std::size_t max_len, std::size_t d_model);

struct AttentionResult {
  Tensor output;
  Tensor weights;  // softmax(QK^T / sqrt(d_k))
};

/// Q: [..., T_q, d_k], K: [..., T_k, d_k], V: [..., T_k, d_v].
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask = nullptr);

struct MultiHeadResult {
  Tensor output;   // [..., T_q, d_model]
  Tensor weights;  // [..., H, T_q, T_k]
};

/// Projections are read from `<prefix>.{q,k,v,out}_proj.{weight,bias}`.
MultiHeadResult multi_head_attention(const Model& model, const std::string& prefix, const Tensor& x_q,
                                     const Tensor& x_kv, const Mask* mask);

/// Conv(M) = M + C'(Concat(C_w1(M), C_w2(M), ...)) with linear same-padded
/// convolutions. keep (optional, one flag per position) zeroes padding
/// before each convolution so batches behave like separate sequences.
Tensor conv_sub_block(const Model& model, const std::string& prefix, const Tensor& m,
                      std::span<const std::uint8_t> keep = {});

/// [B, T_s, d_model].
Tensor encoder_forward(const Model& model, const Batch& batch, const ForwardOptions& options = {});

struct DecoderOutput {
  Tensor logits;                       // [B, T_t, V]
  std::vector<Tensor> cross_attention; // per layer, [B, H, T_t, T_s]
};

DecoderOutput decoder_forward(const Model& model, const Batch& batch, const Tensor& encoded,
                              const ForwardOptions& options = {});

/// Teacher-forced encoder + decoder.
DecoderOutput model_forward(const Model& model, const Batch& batch, const ForwardOptions& options = {});

/// Last-layer cross attention per batch row, averaged over heads and
/// renormalized per row; trimmed to (target length incl. EOS) x (source
/// length excl. padding).
std::vector<AttentionMap> extract_cross_attention(const Model& model, const Batch& batch);

/// Per-head and head-averaged maps for row `row` of a [B, H, T_t, T_s]
/// attention tensor.
std::vector<AttentionMap> attention_maps_for_row(const Tensor& weights, std::size_t row, std::size_t target_len,
                                                 std::size_t source_len, int layer);
AttentionMap average_heads(std::span<const AttentionMap> heads);

/// Step-wise decoder with cached self-attention keys/values, for inference.
/// Rows are independent hypotheses over (possibly repeated) source rows.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const Model& model, const Batch& sources);

  std::size_t rows() const { return rows_; }
  std::size_t steps() const { return steps_; }
  std::size_t source_len(std::size_t row) const { return src_lengths_[row]; }

  /// Feeds one token per row; returns logits [rows, V]. The last-layer
  /// cross attention of this step is available via last_cross_attention().
  std::vector<double> step(std::span<const std::int32_t> tokens);
  /// [rows, H, T_s] from the most recent step.
  const Tensor& last_cross_attention() const { return last_cross_; }

  /// Reorders (and may duplicate) rows; new row i takes old row rows[i].
  void select_rows(std::span<const std::size_t> rows);

 private:
  struct LayerCache {
    Tensor keys;    // [rows, H, t, dh]
    Tensor values;  // [rows, H, t, dh]
    Tensor cross_keys;
    Tensor cross_values;
  };

  const Model& model_;
  std::size_t rows_ = 0;
  std::size_t steps_ = 0;
  std::size_t src_len_ = 0;
  std::vector<std::size_t> src_lengths_;
  Mask src_mask_;
  std::vector<LayerCache> layers_;
  Tensor last_cross_;
};

}  // namespace charmt
