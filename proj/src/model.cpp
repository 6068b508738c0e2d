#include "charmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "charmt/json_fields.hpp"

namespace charmt {

std::string to_string(EncoderKind kind) { return kind == EncoderKind::kConv ? "conv" : "standard"; }

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "standard" || name == "transformer") return EncoderKind::kStandard;
  if (name == "conv" || name == "convtransformer") return EncoderKind::kConv;
  throw std::invalid_argument("unknown encoder kind '" + name + "' (expected standard or conv)");
}

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (n_layers < 1) errors.push_back("n_layers must be >= 1");
  if (n_heads < 1) errors.push_back("n_heads must be >= 1");
  if (d_model < 1) errors.push_back("d_model must be >= 1");
  if (d_model % 2 != 0) errors.push_back("d_model must be even (sinusoidal positions)");
  if (n_heads >= 1 && d_model % n_heads != 0) errors.push_back("d_model must be divisible by n_heads");
  if (d_ff < 1) errors.push_back("d_ff must be >= 1");
  if (conv_windows.empty()) errors.push_back("conv_windows must not be empty");
  for (int w : conv_windows) {
    if (w < 1 || w % 2 == 0) errors.push_back("conv window " + std::to_string(w) + " must be odd and >= 1");
  }
  if (fuse_window < 1 || fuse_window % 2 == 0) errors.push_back("fuse_window must be odd and >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) errors.push_back("dropout must be in [0, 1)");
  if (max_len < 1) errors.push_back("max_len must be >= 1");
  if (vocab_size <= Vocabulary::kReserved) errors.push_back("vocab_size must exceed the 4 reserved ids");
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"encoder_kind", to_string(c.encoder_kind)},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"conv_windows", c.conv_windows},
          {"fuse_window", c.fuse_window},
          {"dropout", c.dropout},
          {"max_len", c.max_len},
          {"vocab_size", c.vocab_size}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, std::vector<std::string>* sink) {
  std::vector<std::string> errors;
  ModelConfig c;
  JsonFields f(j, "model", errors);
  std::string kind = to_string(c.encoder_kind);
  f.read("encoder_kind", kind);
  f.read("n_layers", c.n_layers);
  f.read("n_heads", c.n_heads);
  f.read("d_model", c.d_model);
  f.read("d_ff", c.d_ff);
  f.read("conv_windows", c.conv_windows);
  f.read("fuse_window", c.fuse_window);
  f.read("dropout", c.dropout);
  f.read("max_len", c.max_len);
  f.read("vocab_size", c.vocab_size);
  f.reject_unknown();
  try {
    c.encoder_kind = encoder_kind_from_string(kind);
  } catch (const std::invalid_argument& e) {
    f.error("encoder_kind", e.what());
  }
  if (sink) {
    sink->insert(sink->end(), errors.begin(), errors.end());
    return c;
  }
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  return c;
}

// ---- Parameters ----------------------------------------------------------

namespace {

using Layout = std::vector<std::pair<std::string, Shape>>;

void add_linear(Layout& out, const std::string& prefix, std::size_t in, std::size_t outw) {
  out.push_back({prefix + ".weight", {in, outw}});
  out.push_back({prefix + ".bias", {outw}});
}

void add_attention(Layout& out, const std::string& prefix, std::size_t d) {
  for (const char* p : {"q_proj", "k_proj", "v_proj", "out_proj"}) add_linear(out, prefix + "." + p, d, d);
}

void add_norm(Layout& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + ".gain", {d}});
  out.push_back({prefix + ".bias", {d}});
}

void add_ff(Layout& out, const std::string& prefix, std::size_t d, std::size_t dff) {
  out.push_back({prefix + ".w1", {d, dff}});
  out.push_back({prefix + ".b1", {dff}});
  out.push_back({prefix + ".w2", {dff, d}});
  out.push_back({prefix + ".b2", {d}});
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dff = static_cast<std::size_t>(c.d_ff);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  Layout out;
  out.push_back({"src_embed", {V, d}});
  out.push_back({"tgt_embed", {V, d}});
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    if (c.encoder_kind == EncoderKind::kConv) {
      for (int w : c.conv_windows) {
        const std::string cp = p + ".conv.c" + std::to_string(w);
        out.push_back({cp + ".weight", {static_cast<std::size_t>(w), d, d}});
        out.push_back({cp + ".bias", {d}});
      }
      out.push_back({p + ".conv.fuse.weight",
                     {static_cast<std::size_t>(c.fuse_window), d * c.conv_windows.size(), d}});
      out.push_back({p + ".conv.fuse.bias", {d}});
    }
    add_attention(out, p + ".attn", d);
    add_norm(out, p + ".norm1", d);
    add_ff(out, p + ".ff", d, dff);
    add_norm(out, p + ".norm2", d);
  }
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_attention(out, p + ".self_attn", d);
    add_norm(out, p + ".norm1", d);
    add_attention(out, p + ".cross_attn", d);
    add_norm(out, p + ".norm2", d);
    add_ff(out, p + ".ff", d, dff);
    add_norm(out, p + ".norm3", d);
  }
  add_linear(out, "out_proj", d, V);
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t conv_sub_block_parameter_count(const ModelConfig& c) {
  if (c.encoder_kind != EncoderKind::kConv) return 0;
  const auto d = static_cast<std::size_t>(c.d_model);
  std::size_t n = 0;
  for (int w : c.conv_windows) n += static_cast<std::size_t>(w) * d * d + d;
  n += static_cast<std::size_t>(c.fuse_window) * (c.conv_windows.size() * d) * d + d;
  return n;
}

std::size_t closed_form_parameter_count(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dff = static_cast<std::size_t>(c.d_ff);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto L = static_cast<std::size_t>(c.n_layers);
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t norm = 2 * d;
  const std::size_t ff = d * dff + dff + dff * d + d;
  const std::size_t encoder_layer = attention + 2 * norm + ff + conv_sub_block_parameter_count(c);
  const std::size_t decoder_layer = 2 * attention + 3 * norm + ff;
  return 2 * V * d + L * (encoder_layer + decoder_layer) + d * V + V;
}

Tensor sinusoidal_positions(std::size_t max_len, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) {
    throw std::invalid_argument("sinusoidal_positions: d_model must be even, got " + std::to_string(d_model));
  }
  std::vector<double> pe(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe[pos * d_model + 2 * i] = std::sin(angle);
      pe[pos * d_model + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({max_len, d_model}, std::move(pe));
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  for (const auto& [name, shape] : parameter_layout(config_)) {
    Tensor t;
    if (ends_with(name, ".gain")) {
      t = Tensor::full(shape, 1.0, true);
    } else if (ends_with(name, "bias") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
      t = init_param(shape, InitScheme::kZeros, 0);
    } else {
      t = init_param(shape, InitScheme::kUniformScaled, mix_seed(seed, hash_string(name)));
    }
    params_.add(name, std::move(t));
  }
  positions_ = sinusoidal_positions(static_cast<std::size_t>(config_.max_len), static_cast<std::size_t>(config_.d_model));
}

Model::Model(ModelConfig config, ParameterSet params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != params_.size()) {
    throw std::invalid_argument("parameter set has " + std::to_string(params_.size()) + " tensors, config expects " +
                                std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw std::invalid_argument("missing parameter " + name);
    if (params_.at(name).shape() != shape) {
      throw std::invalid_argument("parameter " + name + " has shape " + shape_str(params_.at(name).shape()) +
                                  ", expected " + shape_str(shape));
    }
  }
  positions_ = sinusoidal_positions(static_cast<std::size_t>(config_.max_len), static_cast<std::size_t>(config_.d_model));
}

// ---- Forward -------------------------------------------------------------

namespace {

Tensor linear(const Model& m, const std::string& prefix, const Tensor& x) {
  return add(matmul(x, m.param(prefix + ".weight")), m.param(prefix + ".bias"));
}

Tensor norm(const Model& m, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, m.param(prefix + ".gain"), m.param(prefix + ".bias"));
}

Tensor feed_forward(const Model& m, const std::string& prefix, const Tensor& x) {
  Tensor h = relu(add(matmul(x, m.param(prefix + ".w1")), m.param(prefix + ".b1")));
  return add(matmul(h, m.param(prefix + ".w2")), m.param(prefix + ".b2"));
}

Tensor maybe_dropout(const Tensor& x, const Model& m, const ForwardOptions& o) {
  if (!o.training || m.config().dropout == 0.0) return x;
  if (!o.rng) throw std::invalid_argument("training forward with dropout needs an Rng");
  return dropout(x, m.config().dropout, *o.rng);
}

// Token embedding scaled by sqrt(d_model) plus positions [offset, offset+T).
Tensor embed(const Model& m, const std::string& table, std::span<const std::int32_t> ids, std::size_t B,
             std::size_t T, std::size_t offset) {
  const auto d = static_cast<std::size_t>(m.config().d_model);
  if (offset + T > static_cast<std::size_t>(m.config().max_len)) {
    throw std::invalid_argument("sequence length " + std::to_string(offset + T) + " exceeds max_len " +
                                std::to_string(m.config().max_len));
  }
  for (std::int32_t id : ids) {
    if (id < 0 || id >= m.config().vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(m.config().vocab_size));
    }
  }
  const auto pos_data = m.positions().data().subspan(offset * d, T * d);
  Tensor pos = Tensor::from_data({T, d}, std::vector<double>(pos_data.begin(), pos_data.end()));
  Tensor e = scale(embedding(m.param(table), ids, {B, T}), std::sqrt(static_cast<double>(d)));
  return add(e, pos);
}

bool all_kept(std::span<const std::uint8_t> mask) {
  return std::all_of(mask.begin(), mask.end(), [](std::uint8_t k) { return k != 0; });
}

void check_batch(const Batch& batch) {
  if (batch.batch_size == 0 || batch.src_len == 0) throw std::invalid_argument("empty source batch");
  if (batch.src_ids.size() != batch.batch_size * batch.src_len) throw std::invalid_argument("malformed batch");
}

Mask key_padding_mask(const Batch& batch) {
  return Mask{{batch.batch_size, 1, 1, batch.src_len}, batch.src_mask};
}

Mask causal_mask(std::size_t T) {
  Mask m{{T, T}, std::vector<std::uint8_t>(T * T, 0)};
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.keep[i * T + j] = 1;
  }
  return m;
}

}  // namespace

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask) {
  if (q.dim(-1) != k.dim(-1)) {
    throw ShapeError("scaled_dot_attention: d_k differs between Q " + shape_str(q.shape()) + " and K " +
                     shape_str(k.shape()));
  }
  if (k.dim(-2) != v.dim(-2)) throw ShapeError("scaled_dot_attention: K and V lengths differ");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt_dk);
  Tensor weights = softmax_lastdim(scores, mask);
  return {matmul(weights, v), weights};
}

MultiHeadResult multi_head_attention(const Model& m, const std::string& prefix, const Tensor& x_q, const Tensor& x_kv,
                                     const Mask* mask) {
  const auto H = static_cast<std::size_t>(m.config().n_heads);
  if (x_q.dim(-1) % H != 0) throw ShapeError("multi_head_attention: d_model not divisible by n_heads");
  Tensor q = split_heads(linear(m, prefix + ".q_proj", x_q), H);
  Tensor k = split_heads(linear(m, prefix + ".k_proj", x_kv), H);
  Tensor v = split_heads(linear(m, prefix + ".v_proj", x_kv), H);
  AttentionResult att = scaled_dot_attention(q, k, v, mask);
  return {linear(m, prefix + ".out_proj", merge_heads(att.output)), att.weights};
}

Tensor conv_sub_block(const Model& m, const std::string& prefix, const Tensor& x, std::span<const std::uint8_t> keep) {
  const bool masked = !keep.empty() && !all_kept(keep);
  const Tensor input = masked ? mask_positions(x, keep) : x;
  std::vector<Tensor> branches;
  for (int w : m.config().conv_windows) {
    const std::string p = prefix + ".c" + std::to_string(w);
    branches.push_back(conv1d_same(input, m.param(p + ".weight"), m.param(p + ".bias")));
  }
  Tensor joined = concat_lastdim(branches);
  if (masked) joined = mask_positions(joined, keep);
  Tensor fused = conv1d_same(joined, m.param(prefix + ".fuse.weight"), m.param(prefix + ".fuse.bias"));
  return add(x, fused);
}

Tensor encoder_forward(const Model& m, const Batch& batch, const ForwardOptions& o) {
  check_batch(batch);
  const ModelConfig& c = m.config();
  const std::size_t B = batch.batch_size;
  const std::size_t T = batch.src_len;
  Tensor x = maybe_dropout(embed(m, "src_embed", batch.src_ids, B, T, 0), m, o);
  const Mask keys = key_padding_mask(batch);
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    if (c.encoder_kind == EncoderKind::kConv) x = conv_sub_block(m, p + ".conv", x, batch.src_mask);
    MultiHeadResult a = multi_head_attention(m, p + ".attn", x, x, &keys);
    x = norm(m, p + ".norm1", add(x, maybe_dropout(a.output, m, o)));
    x = norm(m, p + ".norm2", add(x, maybe_dropout(feed_forward(m, p + ".ff", x), m, o)));
  }
  return x;
}

DecoderOutput decoder_forward(const Model& m, const Batch& batch, const Tensor& encoded, const ForwardOptions& o) {
  check_batch(batch);
  const ModelConfig& c = m.config();
  const std::size_t B = batch.batch_size;
  const std::size_t T = batch.tgt_len;
  if (T == 0) throw std::invalid_argument("empty target batch");
  Tensor y = maybe_dropout(embed(m, "tgt_embed", batch.tgt_in_ids, B, T, 0), m, o);
  const Mask causal = causal_mask(T);
  const Mask keys = key_padding_mask(batch);
  DecoderOutput out;
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    MultiHeadResult sa = multi_head_attention(m, p + ".self_attn", y, y, &causal);
    y = norm(m, p + ".norm1", add(y, maybe_dropout(sa.output, m, o)));
    MultiHeadResult ca = multi_head_attention(m, p + ".cross_attn", y, encoded, &keys);
    out.cross_attention.push_back(ca.weights);
    y = norm(m, p + ".norm2", add(y, maybe_dropout(ca.output, m, o)));
    y = norm(m, p + ".norm3", add(y, maybe_dropout(feed_forward(m, p + ".ff", y), m, o)));
  }
  out.logits = linear(m, "out_proj", y);
  return out;
}

DecoderOutput model_forward(const Model& m, const Batch& batch, const ForwardOptions& o) {
  return decoder_forward(m, batch, encoder_forward(m, batch, o), o);
}

std::vector<AttentionMap> attention_maps_for_row(const Tensor& weights, std::size_t row, std::size_t target_len,
                                                 std::size_t source_len, int layer) {
  if (weights.rank() != 4) throw ShapeError("attention weights must be [B, H, T_t, T_s]");
  const std::size_t H = weights.dim(1);
  const std::size_t Tt = weights.dim(2);
  const std::size_t Ts = weights.dim(3);
  if (row >= weights.dim(0) || target_len > Tt || source_len > Ts) throw ShapeError("attention map out of range");
  const auto w = weights.data();
  std::vector<AttentionMap> maps;
  for (std::size_t h = 0; h < H; ++h) {
    AttentionMap map;
    map.rows = target_len;
    map.cols = source_len;
    map.layer = layer;
    map.head = static_cast<int>(h);
    map.source_len = source_len;
    map.target_len = target_len;
    map.values.resize(target_len * source_len);
    for (std::size_t t = 0; t < target_len; ++t) {
      const std::size_t base = ((row * H + h) * Tt + t) * Ts;
      std::copy_n(w.data() + base, source_len, map.values.data() + t * source_len);
    }
    maps.push_back(std::move(map));
  }
  return maps;
}

AttentionMap average_heads(std::span<const AttentionMap> heads) {
  if (heads.empty()) throw std::invalid_argument("average_heads: no maps");
  AttentionMap avg = heads[0];
  avg.head = -1;
  std::fill(avg.values.begin(), avg.values.end(), 0.0);
  for (const auto& h : heads) {
    if (h.rows != avg.rows || h.cols != avg.cols) throw ShapeError("average_heads: map sizes differ");
    for (std::size_t i = 0; i < avg.values.size(); ++i) avg.values[i] += h.values[i];
  }
  for (std::size_t r = 0; r < avg.rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < avg.cols; ++c) total += avg.values[r * avg.cols + c];
    if (total > 0.0) {
      for (std::size_t c = 0; c < avg.cols; ++c) avg.values[r * avg.cols + c] /= total;
    }
  }
  return avg;
}

std::vector<AttentionMap> extract_cross_attention(const Model& m, const Batch& batch) {
  NoGradGuard no_grad;
  DecoderOutput out = model_forward(m, batch);
  const Tensor& last = out.cross_attention.back();
  std::vector<AttentionMap> maps;
  for (std::size_t r = 0; r < batch.batch_size; ++r) {
    const auto heads = attention_maps_for_row(last, r, batch.tgt_lengths[r], batch.src_lengths[r],
                                              m.config().n_layers - 1);
    maps.push_back(average_heads(heads));
  }
  return maps;
}

// ---- Incremental decoding ------------------------------------------------

namespace {

// Appends new_step [R, H, 1, dh] to cache [R, H, t, dh] along the time axis.
Tensor append_time(const Tensor& cache, const Tensor& new_step) {
  if (!cache.defined()) return new_step.detach();
  const std::size_t R = cache.dim(0);
  const std::size_t H = cache.dim(1);
  const std::size_t t = cache.dim(2);
  const std::size_t dh = cache.dim(3);
  std::vector<double> out(R * H * (t + 1) * dh);
  const auto c = cache.data();
  const auto n = new_step.data();
  for (std::size_t rh = 0; rh < R * H; ++rh) {
    std::copy_n(c.data() + rh * t * dh, t * dh, out.data() + rh * (t + 1) * dh);
    std::copy_n(n.data() + rh * dh, dh, out.data() + rh * (t + 1) * dh + t * dh);
  }
  return Tensor::from_data({R, H, t + 1, dh}, std::move(out));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (!t.defined()) return t;
  const std::size_t block = t.numel() / t.dim(0);
  std::vector<double> out(rows.size() * block);
  const auto d = t.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.data() + rows[i] * block, block, out.data() + i * block);
  }
  Shape shape = t.shape();
  shape[0] = rows.size();
  return Tensor::from_data(std::move(shape), std::move(out));
}

}  // namespace

IncrementalDecoder::IncrementalDecoder(const Model& model, const Batch& sources)
    : model_(model),
      rows_(sources.batch_size),
      src_len_(sources.src_len),
      src_lengths_(sources.src_lengths),
      src_mask_(key_padding_mask(sources)) {
  NoGradGuard no_grad;
  const Tensor encoded = encoder_forward(model, sources);
  const auto H = static_cast<std::size_t>(model.config().n_heads);
  for (int i = 0; i < model.config().n_layers; ++i) {
    const std::string p = "dec." + std::to_string(i) + ".cross_attn";
    LayerCache cache;
    cache.cross_keys = split_heads(linear(model, p + ".k_proj", encoded), H);
    cache.cross_values = split_heads(linear(model, p + ".v_proj", encoded), H);
    layers_.push_back(std::move(cache));
  }
}

std::vector<double> IncrementalDecoder::step(std::span<const std::int32_t> tokens) {
  if (tokens.size() != rows_) throw std::invalid_argument("IncrementalDecoder::step: one token per row required");
  NoGradGuard no_grad;
  const auto H = static_cast<std::size_t>(model_.config().n_heads);
  Tensor y = embed(model_, "tgt_embed", tokens, rows_, 1, steps_);
  for (int i = 0; i < model_.config().n_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    LayerCache& cache = layers_[static_cast<std::size_t>(i)];
    Tensor q = split_heads(linear(model_, p + ".self_attn.q_proj", y), H);
    cache.keys = append_time(cache.keys, split_heads(linear(model_, p + ".self_attn.k_proj", y), H));
    cache.values = append_time(cache.values, split_heads(linear(model_, p + ".self_attn.v_proj", y), H));
    AttentionResult sa = scaled_dot_attention(q, cache.keys, cache.values);
    y = norm(model_, p + ".norm1", add(y, linear(model_, p + ".self_attn.out_proj", merge_heads(sa.output))));

    Tensor q2 = split_heads(linear(model_, p + ".cross_attn.q_proj", y), H);
    AttentionResult ca = scaled_dot_attention(q2, cache.cross_keys, cache.cross_values, &src_mask_);
    if (i + 1 == model_.config().n_layers) {
      last_cross_ = Tensor::from_data({rows_, H, src_len_}, std::vector<double>(ca.weights.data().begin(),
                                                                                  ca.weights.data().end()));
    }
    y = norm(model_, p + ".norm2", add(y, linear(model_, p + ".cross_attn.out_proj", merge_heads(ca.output))));
    y = norm(model_, p + ".norm3", add(y, feed_forward(model_, p + ".ff", y)));
  }
  ++steps_;
  const Tensor logits = linear(model_, "out_proj", y);
  return std::vector<double>(logits.data().begin(), logits.data().end());
}

void IncrementalDecoder::select_rows(std::span<const std::size_t> rows) {
  for (std::size_t r : rows) {
    if (r >= rows_) throw std::out_of_range("IncrementalDecoder::select_rows: row out of range");
  }
  for (auto& cache : layers_) {
    cache.keys = gather_rows(cache.keys, rows);
    cache.values = gather_rows(cache.values, rows);
    cache.cross_keys = gather_rows(cache.cross_keys, rows);
    cache.cross_values = gather_rows(cache.cross_values, rows);
  }
  last_cross_ = gather_rows(last_cross_, rows);
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> keep;
  for (std::size_t r : rows) {
    lengths.push_back(src_lengths_[r]);
    keep.insert(keep.end(), src_mask_.keep.begin() + static_cast<std::ptrdiff_t>(r * src_len_),
                src_mask_.keep.begin() + static_cast<std::ptrdiff_t>((r + 1) * src_len_));
  }
  src_lengths_ = std::move(lengths);
  src_mask_ = Mask{{rows.size(), 1, 1, src_len_}, std::move(keep)};
  rows_ = rows.size();
}

}  // namespace charmt
