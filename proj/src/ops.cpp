#include "charmt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace charmt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using Inputs = std::span<const std::shared_ptr<TensorImpl>>;

ConstMatMap cmap(const std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatMap mmap(std::vector<double>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MatMap(v.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

void require_rank_at_least(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() < r) {
    throw ShapeError(std::string(op) + ": expected rank >= " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
  }
}

}  // namespace

Tensor init_param(const Shape& shape, InitScheme scheme, std::uint64_t seed) {
  if (shape.empty()) throw ShapeError("init_param: empty shape");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("init_param: extents must be positive, got " + shape_str(shape));
  }
  std::vector<double> values(shape_numel(shape), 0.0);
  if (scheme == InitScheme::kUniformScaled) {
    double fan_in = 0;
    double fan_out = 0;
    if (shape.size() == 1) {
      fan_in = fan_out = static_cast<double>(shape[0]);
    } else {
      double receptive = 1;
      for (std::size_t i = 0; i + 2 < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
      fan_in = receptive * static_cast<double>(shape[shape.size() - 2]);
      fan_out = receptive * static_cast<double>(shape.back());
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(seed);
    for (double& v : values) v = rng.uniform(-bound, bound);
  }
  return Tensor::from_data(shape, std::move(values), true);
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) {
    throw ShapeError("add: " + shape_str(b.shape()) + " does not broadcast to " + shape_str(a.shape()));
  }
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  const std::size_t n = ad.size();
  const std::size_t inner = bd.size();
  std::vector<double> out(n);
  for (std::size_t base = 0; base < n; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) out[base + j] = ad[base + j] + bd[j];
  }
  return detail::make_result(OpId::kAdd, a.shape(), std::move(out), {&a, &b},
                             [inner](TensorImpl& o, Inputs in) {
                               const auto& g = o.grad;
                               if (in[0]->requires_grad) {
                                 auto& ga = in[0]->grad;
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (in[1]->requires_grad) {
                                 auto& gb = in[1]->grad;
                                 for (std::size_t base = 0; base < g.size(); base += inner) {
                                   for (std::size_t j = 0; j < inner; ++j) gb[j] += g[base + j];
                                 }
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result(OpId::kMul, a.shape(), std::move(out), {&a, &b},
                             [](TensorImpl& o, Inputs in) {
                               const auto& g = o.grad;
                               const auto& x = in[0]->data;
                               const auto& y = in[1]->data;
                               if (in[0]->requires_grad) {
                                 for (std::size_t i = 0; i < g.size(); ++i) in[0]->grad[i] += g[i] * y[i];
                               }
                               if (in[1]->requires_grad) {
                                 for (std::size_t i = 0; i < g.size(); ++i) in[1]->grad[i] += g[i] * x[i];
                               }
                             });
}

Tensor scale(const Tensor& a, double factor) {
  const auto& ad = a.impl()->data;
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return detail::make_result(OpId::kScale, a.shape(), std::move(out), {&a},
                             [factor](TensorImpl& o, Inputs in) {
                               auto& ga = in[0]->grad;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * factor;
                             });
}

Tensor relu(const Tensor& a) {
  const auto& ad = a.impl()->data;
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  return detail::make_result(OpId::kRelu, a.shape(), std::move(out), {&a},
                             [](TensorImpl& o, Inputs in) {
                               auto& ga = in[0]->grad;
                               const auto& x = in[0]->data;
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                 if (x[i] > 0.0) ga[i] += o.grad[i];
                               }
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_rank_at_least(a, 2, "matmul");
  require_rank_at_least(b, 2, "matmul");
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("matmul: batch extents differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const std::size_t batch = a.numel() / (m * k);
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  std::vector<double> out(batch * m * n, 0.0);

  // With a shared right operand, the batch folds into the row dimension.
  const std::size_t groups = shared ? 1 : batch;
  const std::size_t rows = shared ? batch * m : m;
  const std::size_t b_rows = transpose_b ? n : k;
  const std::size_t b_cols = transpose_b ? k : n;
  for (std::size_t g = 0; g < groups; ++g) {
    auto A = cmap(ad, g * rows * k, rows, k);
    auto B = cmap(bd, shared ? 0 : g * k * n, b_rows, b_cols);
    auto C = mmap(out, g * rows * n, rows, n);
    if (transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }

  return detail::make_result(
      OpId::kMatMul, std::move(out_shape), std::move(out), {&a, &b},
      [=](TensorImpl& o, Inputs in) {
        const auto& adata = in[0]->data;
        const auto& bdata = in[1]->data;
        for (std::size_t g = 0; g < groups; ++g) {
          auto dC = cmap(o.grad, g * rows * n, rows, n);
          auto B = cmap(bdata, shared ? 0 : g * k * n, b_rows, b_cols);
          if (in[0]->requires_grad) {
            auto dA = mmap(in[0]->grad, g * rows * k, rows, k);
            if (transpose_b) {
              dA.noalias() += dC * B;
            } else {
              dA.noalias() += dC * B.transpose();
            }
          }
          if (in[1]->requires_grad) {
            auto A = cmap(adata, g * rows * k, rows, k);
            auto dB = mmap(in[1]->grad, shared ? 0 : g * k * n, b_rows, b_cols);
            if (transpose_b) {
              dB.noalias() += dC.transpose() * A;
            } else {
              dB.noalias() += A.transpose() * dC;
            }
          }
        }
      });
}

Tensor softmax_lastdim(const Tensor& x, const Mask* mask) {
  require_rank_at_least(x, 1, "softmax_lastdim");
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  const auto& xd = x.impl()->data;

  // Offset of each row's mask slice, plus the stride along the last dim.
  std::vector<std::size_t> mask_row(rows, 0);
  std::size_t mask_col_stride = 0;
  if (mask) {
    const Shape& xs = x.shape();
    const Shape& ms = mask->shape;
    if (ms.size() > xs.size() || ms.empty() || shape_numel(ms) != mask->keep.size()) {
      throw ShapeError("softmax_lastdim: mask " + shape_str(ms) + " does not broadcast to " +
                       shape_str(xs));
    }
    const std::size_t shift = xs.size() - ms.size();
    std::vector<std::size_t> stride(xs.size(), 0);
    std::size_t acc = 1;
    for (std::size_t j = ms.size(); j-- > 0;) {
      const std::size_t i = j + shift;
      if (ms[j] != 1 && ms[j] != xs[i]) {
        throw ShapeError("softmax_lastdim: mask " + shape_str(ms) + " does not broadcast to " +
                         shape_str(xs));
      }
      stride[i] = ms[j] == 1 ? 0 : acc;
      acc *= ms[j];
    }
    mask_col_stride = stride.back();
    // Odometer over the leading dims of x.
    const std::size_t lead = xs.size() - 1;
    std::vector<std::size_t> idx(lead, 0);
    std::size_t off = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      mask_row[r] = off;
      for (std::size_t i = lead; i-- > 0;) {
        ++idx[i];
        off += stride[i];
        if (idx[i] < xs[i]) break;
        off -= stride[i] * idx[i];
        idx[i] = 0;
      }
    }
  }

  std::vector<double> out(xd.size());
  std::vector<double> z(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double* yr = out.data() + r * d;
    bool any = !mask;
    for (std::size_t j = 0; j < d; ++j) {
      z[j] = xr[j];
      if (mask) {
        if (mask->keep[mask_row[r] + j * mask_col_stride]) {
          any = true;
        } else {
          z[j] += kMaskedLogit;
        }
      }
    }
    if (!any) throw std::invalid_argument("softmax_lastdim: slice is fully masked");
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      yr[j] = std::exp(z[j] - mx);
      total += yr[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < d; ++j) yr[j] *= inv;
  }

  return detail::make_result(OpId::kSoftmax, x.shape(), std::move(out), {&x},
                             [d, rows](TensorImpl& o, Inputs in) {
                               auto& gx = in[0]->grad;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = o.data.data() + r * d;
                                 const double* g = o.grad.data() + r * d;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) dot += y[j] * g[j];
                                 double* gr = gx.data() + r * d;
                                 for (std::size_t j = 0; j < d; ++j) gr[j] += y[j] * (g[j] - dot);
                               }
                             });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank_at_least(x, 1, "layer_norm");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  const auto& xd = x.impl()->data;
  const auto& gd = gain.impl()->data;
  const auto& bd = bias.impl()->data;
  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  return detail::make_result(
      OpId::kLayerNorm, x.shape(), std::move(out), {&x, &gain, &bias},
      [d, rows, xhat, rstd](TensorImpl& o, Inputs in) {
        const auto& gd = in[1]->data;
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = o.grad.data() + r * d;
          const double* h = xhat->data() + r * d;
          if (in[1]->requires_grad) {
            for (std::size_t j = 0; j < d; ++j) in[1]->grad[j] += g[j] * h[j];
          }
          if (in[2]->requires_grad) {
            for (std::size_t j = 0; j < d; ++j) in[2]->grad[j] += g[j];
          }
          if (in[0]->requires_grad) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[j] * gd[j];
              mean_dh += dh;
              mean_dh_h += dh * h[j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            double* gx = in[0]->grad.data() + r * d;
            const double rs = (*rstd)[r];
            for (std::size_t j = 0; j < d; ++j) {
              gx[j] += rs * (g[j] * gd[j] - mean_dh - h[j] * mean_dh_h);
            }
          }
        }
      });
}

std::size_t same_padding(std::size_t window) {
  if (window == 0 || window % 2 == 0) {
    throw std::invalid_argument("conv window must be odd and >= 1, got " + std::to_string(window));
  }
  return (window - 1) / 2;
}

Tensor conv1d_same(const Tensor& x, const Tensor& kernels, const Tensor& bias) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("conv1d_same: x must be [T,d] or [B,T,d]");
  if (kernels.rank() != 3) throw ShapeError("conv1d_same: kernels must be [w, d_in, d_out]");
  const std::size_t w = kernels.dim(0);
  const std::size_t pad = same_padding(w);
  const std::size_t d_in = x.dim(-1);
  const std::size_t d_out = kernels.dim(2);
  if (kernels.dim(1) != d_in) {
    throw ShapeError("conv1d_same: kernel input width " + std::to_string(kernels.dim(1)) +
                     " != input features " + std::to_string(d_in));
  }
  if (bias.shape() != Shape{d_out}) throw ShapeError("conv1d_same: bias must be [d_out]");
  const std::size_t T = x.dim(-2);
  const std::size_t B = x.numel() / (T * d_in);
  const std::size_t cols_w = w * d_in;
  const auto& xd = x.impl()->data;

  // im2col: row (b, t) holds x[b, t + j - pad, :] for j = 0..w-1.
  auto cols = std::make_shared<std::vector<double>>(B * T * cols_w, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      double* row = cols->data() + (b * T + t) * cols_w;
      for (std::size_t j = 0; j < w; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
        std::copy_n(xd.data() + (b * T + static_cast<std::size_t>(src)) * d_in, d_in, row + j * d_in);
      }
    }
  }
  std::vector<double> out(B * T * d_out);
  auto C = mmap(out, 0, B * T, d_out);
  C.noalias() = cmap(*cols, 0, B * T, cols_w) * cmap(kernels.impl()->data, 0, cols_w, d_out);
  const auto& bd = bias.impl()->data;
  for (std::size_t r = 0; r < B * T; ++r) {
    for (std::size_t o = 0; o < d_out; ++o) out[r * d_out + o] += bd[o];
  }
  Shape out_shape = x.shape();
  out_shape.back() = d_out;

  return detail::make_result(
      OpId::kConv1d, std::move(out_shape), std::move(out), {&x, &kernels, &bias},
      [=](TensorImpl& o, Inputs in) {
        auto dY = cmap(o.grad, 0, B * T, d_out);
        if (in[1]->requires_grad) {
          mmap(in[1]->grad, 0, cols_w, d_out).noalias() += cmap(*cols, 0, B * T, cols_w).transpose() * dY;
        }
        if (in[2]->requires_grad) {
          auto& gb = in[2]->grad;
          for (std::size_t r = 0; r < B * T; ++r) {
            for (std::size_t c = 0; c < d_out; ++c) gb[c] += o.grad[r * d_out + c];
          }
        }
        if (in[0]->requires_grad) {
          std::vector<double> dcols(B * T * cols_w);
          mmap(dcols, 0, B * T, cols_w).noalias() =
              dY * cmap(in[1]->data, 0, cols_w, d_out).transpose();
          auto& gx = in[0]->grad;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < T; ++t) {
              const double* row = dcols.data() + (b * T + t) * cols_w;
              for (std::size_t j = 0; j < w; ++j) {
                const std::ptrdiff_t src =
                    static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                double* dst = gx.data() + (b * T + static_cast<std::size_t>(src)) * d_in;
                for (std::size_t c = 0; c < d_in; ++c) dst[c] += row[j * d_in + c];
              }
            }
          }
        }
      });
}

Tensor concat_lastdim(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t rows = parts[0].numel() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      throw ShapeError("concat_lastdim: leading extents differ");
    }
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pd = parts[i].impl()->data;
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pd.data() + r * widths[i], widths[i], out.data() + r * total + offset);
    }
    offset += widths[i];
  }
  Shape out_shape = first;
  out_shape.back() = total;
  return detail::make_result(OpId::kConcat, std::move(out_shape), std::move(out), parts,
                             [rows, total, widths](TensorImpl& o, Inputs in) {
                               std::size_t off = 0;
                               for (std::size_t i = 0; i < in.size(); ++i) {
                                 if (in[i]->requires_grad) {
                                   auto& g = in[i]->grad;
                                   for (std::size_t r = 0; r < rows; ++r) {
                                     const double* src = o.grad.data() + r * total + off;
                                     double* dst = g.data() + r * widths[i];
                                     for (std::size_t c = 0; c < widths[i]; ++c) dst[c] += src[c];
                                   }
                                 }
                                 off += widths[i];
                               }
                             });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, d]");
  if (shape_numel(ids_shape) != ids.size()) throw ShapeError("embedding: ids do not match ids_shape");
  const std::size_t V = table.dim(0);
  const std::size_t d = table.dim(1);
  const auto& td = table.impl()->data;
  std::vector<double> out(ids.size() * d);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw std::out_of_range("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(V));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  return detail::make_result(OpId::kEmbedding, std::move(out_shape), std::move(out), {&table},
                             [d, saved = std::move(saved)](TensorImpl& o, Inputs in) {
                               auto& g = in[0]->grad;
                               for (std::size_t i = 0; i < saved.size(); ++i) {
                                 double* dst = g.data() + static_cast<std::size_t>(saved[i]) * d;
                                 const double* src = o.grad.data() + i * d;
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                               }
                             });
}

namespace {
// Moves [L, T, H, dh] <-> [L, H, T, dh]; forward when to_heads is true.
void permute_heads(const double* src, double* dst, std::size_t L, std::size_t T, std::size_t H,
                   std::size_t dh, bool to_heads, bool accumulate) {
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t a = ((l * T + t) * H + h) * dh;  // [L, T, H*dh]
        const std::size_t b = ((l * H + h) * T + t) * dh;  // [L, H, T, dh]
        const double* s = src + (to_heads ? a : b);
        double* d = dst + (to_heads ? b : a);
        if (accumulate) {
          for (std::size_t e = 0; e < dh; ++e) d[e] += s[e];
        } else {
          std::copy_n(s, dh, d);
        }
      }
    }
  }
}
}  // namespace

Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  require_rank_at_least(x, 2, "split_heads");
  const std::size_t D = x.dim(-1);
  if (n_heads == 0 || D % n_heads != 0) {
    throw ShapeError("split_heads: width " + std::to_string(D) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t T = x.dim(-2);
  const std::size_t dh = D / n_heads;
  const std::size_t L = x.numel() / (T * D);
  std::vector<double> out(x.numel());
  permute_heads(x.impl()->data.data(), out.data(), L, T, n_heads, dh, true, false);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.insert(out_shape.end(), {n_heads, T, dh});
  return detail::make_result(OpId::kSplitHeads, std::move(out_shape), std::move(out), {&x},
                             [=](TensorImpl& o, Inputs in) {
                               permute_heads(o.grad.data(), in[0]->grad.data(), L, T, n_heads, dh, false,
                                             true);
                             });
}

Tensor merge_heads(const Tensor& x) {
  require_rank_at_least(x, 3, "merge_heads");
  const std::size_t H = x.dim(-3);
  const std::size_t T = x.dim(-2);
  const std::size_t dh = x.dim(-1);
  const std::size_t L = x.numel() / (H * T * dh);
  std::vector<double> out(x.numel());
  permute_heads(x.impl()->data.data(), out.data(), L, T, H, dh, false, false);
  Shape out_shape(x.shape().begin(), x.shape().end() - 3);
  out_shape.insert(out_shape.end(), {T, H * dh});
  return detail::make_result(OpId::kMergeHeads, std::move(out_shape), std::move(out), {&x},
                             [=](TensorImpl& o, Inputs in) {
                               permute_heads(o.grad.data(), in[0]->grad.data(), L, T, H, dh, true, true);
                             });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  const auto& xd = x.impl()->data;
  auto factors = std::make_shared<std::vector<double>>(xd.size());
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    (*factors)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = xd[i] * (*factors)[i];
  }
  return detail::make_result(OpId::kDropout, x.shape(), std::move(out), {&x},
                             [factors](TensorImpl& o, Inputs in) {
                               auto& g = in[0]->grad;
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*factors)[i];
                             });
}

Tensor mask_positions(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_rank_at_least(x, 1, "mask_positions");
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  if (keep.size() != rows) throw ShapeError("mask_positions: keep has wrong length");
  std::vector<double> out = x.impl()->data;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!keep[r]) std::fill_n(out.data() + r * d, d, 0.0);
  }
  std::vector<std::uint8_t> saved(keep.begin(), keep.end());
  return detail::make_result(OpId::kMaskPositions, x.shape(), std::move(out), {&x},
                             [d, saved = std::move(saved)](TensorImpl& o, Inputs in) {
                               auto& g = in[0]->grad;
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 if (!saved[r]) continue;
                                 for (std::size_t c = 0; c < d; ++c) g[r * d + c] += o.grad[r * d + c];
                               }
                             });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.impl()->data) total += v;
  return detail::make_result(OpId::kSum, {}, {total}, {&x}, [](TensorImpl& o, Inputs in) {
    for (double& g : in[0]->grad) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (double v : x.impl()->data) total += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return detail::make_result(OpId::kMean, {}, {total * inv}, {&x}, [inv](TensorImpl& o, Inputs in) {
    for (double& g : in[0]->grad) g += o.grad[0] * inv;
  });
}

}  // namespace charmt
