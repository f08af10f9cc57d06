#pragma once

#include <cstdint>
#include <vector>

#include "mupad/tensor.hpp"

/// Differentiable operators. Each op is pure when no tape is active; with an
/// active tape and a grad-requiring input it records its backward rule.
/// Row ops take rank-2 tensors [rows, features].
namespace mupad::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);

/// x[R,D] + b[D] broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& b);
/// x[R,D] * g[D] broadcast over rows.
Tensor mul_rowvec(const Tensor& x, const Tensor& g);
/// Scales each row by a constant (non-differentiable) factor.
Tensor scale_rows(const Tensor& x, const std::vector<double>& factors);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[R,in] . w[in,out] (+ b[out]); `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

Tensor softmax_lastdim(const Tensor& x);
/// Normalises the last dim to zero mean / unit variance, then applies the
/// optional affine gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {}, double eps = 1e-5);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2); `b` is usually a constant target.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor detach(const Tensor& x);

/// out[i] = x[perm[i]] with a new shape; used for (un)patchify layouts.
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm, Shape shape);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);
/// [B,D] -> [B*n,D], each row repeated n times consecutively.
Tensor repeat_rows(const Tensor& x, std::size_t n);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t queries = 1;  // per batch element
  std::size_t keys = 1;     // per batch element
  std::size_t heads = 1;
};

/// Multi-head scaled dot-product attention over packed rows:
/// q[B*Nq,D], k[B*Nk,D], v[B*Nk,Dv] -> [B*Nq,Dv].
///
/// `key_mask` (size B*Nk, nonzero = valid) may be empty. A batch element with
/// no valid key yields exactly zero output and zero probabilities.
/// When `probs_override` ([B,H,Nq,Nk]) is given it replaces the softmax
/// probabilities and only `v` receives gradient. When `probs_out` is non-null
/// the probabilities actually used are written there.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 const std::vector<std::uint8_t>& key_mask = {}, const Tensor* probs_override = nullptr,
                 Tensor* probs_out = nullptr);

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

/// Channels-last cross-correlation. x[B*H*W, C] (rows in b,y,x order),
/// kernels[k*k*C, Cout] with row index (ky*k + kx)*C + c, bias[Cout] optional.
/// Returns [B*Ho*Wo, Cout].
Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, const ConvGeometry& geom);

}  // namespace mupad::ops
