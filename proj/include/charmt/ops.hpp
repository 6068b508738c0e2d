#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "charmt/rng.hpp"
#include "charmt/tensor.hpp"

namespace charmt {

/// Additive logit for masked-out softmax positions.
inline constexpr double kMaskedLogit = -1e9;

/// Boolean keep-mask, broadcast against a tensor with numpy-style right
/// alignment (each mask extent equals the tensor extent or is 1).
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  static Mask all(Shape shape) { return Mask{shape, std::vector<std::uint8_t>(shape_numel(shape), 1)}; }
};

enum class InitScheme { kUniformScaled, kZeros };

/// Glorot-style U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), or zeros.
/// fan_in/fan_out: 1-D [n] -> n/n; 2-D [in, out]; 3-D kernels [w, in, out]
/// -> w*in / w*out.
Tensor init_param(const Shape& shape, InitScheme scheme, std::uint64_t seed);

/// Elementwise sum. b may equal a's shape or a trailing suffix of it, in which
/// case it is broadcast over a's leading dimensions (bias, positions).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);

/// a: [..., m, k]. b: [k, n] shared across a's leading dims, or
/// [..., k, n] with leading dims identical to a's. With transpose_b the
/// trailing pair of b is read as [n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

std::size_t same_padding(std::size_t window);

/// x: [T, d_in] or [B, T, d_in]; kernels: [w, d_in, d_out]; bias: [d_out].
/// Zero padding of (w-1)/2 on both ends of every sequence.
Tensor conv1d_same(const Tensor& x, const Tensor& kernels, const Tensor& bias);

Tensor concat_lastdim(std::span<const Tensor> parts);

/// Rows of table [V, d] gathered by ids; output shape ids_shape + [d].
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape);

/// [..., T, H*dh] -> [..., H, T, dh] and back.
Tensor split_heads(const Tensor& x, std::size_t n_heads);
Tensor merge_heads(const Tensor& x);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Zeroes the rows x[..., t, :] whose keep flag is 0. keep has numel(x)/d
/// entries.
Tensor mask_positions(const Tensor& x, std::span<const std::uint8_t> keep);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace charmt
