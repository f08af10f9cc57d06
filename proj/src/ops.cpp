#include "mupad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace mupad::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using CStrided = Eigen::Map<const RowMat, 0, Stride>;
using MStrided = Eigen::Map<RowMat, 0, Stride>;

Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

void record(Tape* tape, const char* name, std::vector<Tensor> inputs, Tensor& out, BackwardFn fn) {
  out.set_requires_grad(true);
  tape->record(TapeNode{name, std::move(inputs), out, std::move(fn)});
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(x.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t last_dim(const Tensor& x, const char* op) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": scalar input");
  std::size_t d = x.shape().back();
  if (d == 0) throw ShapeError(std::string(op) + ": empty last dimension");
  return d;
}

void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  check_finite(out, "add");
  if (Tape* tape = recording({&a, &b})) {
    record(tape, "add", {a, b}, out, [a, b](std::span<const double> g) mutable {
      accumulate(a, g);
      accumulate(b, g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  check_finite(out, "sub");
  if (Tape* tape = recording({&a, &b})) {
    record(tape, "sub", {a, b}, out, [a, b](std::span<const double> g) mutable {
      accumulate(a, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  check_finite(out, "mul");
  if (Tape* tape = recording({&a, &b})) {
    record(tape, "mul", {a, b}, out, [a, b](std::span<const double> g) mutable {
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  check_finite(out, "scale");
  if (Tape* tape = recording({&a})) {
    record(tape, "scale", {a}, out, [a, s](std::span<const double> g) mutable {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + s;
  check_finite(out, "add_scalar");
  if (Tape* tape = recording({&a})) {
    record(tape, "add_scalar", {a}, out, [a](std::span<const double> g) mutable { accumulate(a, g); });
  }
  return out;
}

Tensor square(const Tensor& a) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * x[i];
  check_finite(out, "square");
  if (Tape* tape = recording({&a})) {
    record(tape, "square", {a}, out, [a](std::span<const double> g) mutable {
      auto x = a.data();
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row broadcasting

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require_rank2(x, "add_rowvec");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (b.numel() != cols) throw ShapeError("add_rowvec: bias length mismatch");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data(), bd = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xd[r * cols + c] + bd[c];
  check_finite(out, "add_rowvec");
  if (Tape* tape = recording({&x, &b})) {
    record(tape, "add_rowvec", {x, b}, out, [x, b, rows, cols](std::span<const double> g) mutable {
      accumulate(x, g);
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& gvec) {
  require_rank2(x, "mul_rowvec");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (gvec.numel() != cols) throw ShapeError("mul_rowvec: gain length mismatch");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data(), gd = gvec.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xd[r * cols + c] * gd[c];
  check_finite(out, "mul_rowvec");
  if (Tape* tape = recording({&x, &gvec})) {
    record(tape, "mul_rowvec", {x, gvec}, out, [x, gvec, rows, cols](std::span<const double> g) mutable {
      auto xd = x.data(), gd = gvec.data();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * gd[c];
      }
      if (gvec.requires_grad()) {
        auto gg = gvec.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xd[r * cols + c];
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& factors) {
  require_rank2(x, "scale_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (factors.size() != rows) throw ShapeError("scale_rows: factor count mismatch");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = xd[r * cols + c] * factors[r];
  check_finite(out, "scale_rows");
  if (Tape* tape = recording({&x})) {
    record(tape, "scale_rows", {x}, out, [x, factors, cols](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < factors.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * factors[r];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Products

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  MMap(out.mutable_data().data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
  check_finite(out, "matmul");
  if (Tape* tape = recording({&a, &b})) {
    record(tape, "matmul", {a, b}, out, [a, b, m, k, n](std::span<const double> g) mutable {
      CMap gm(g.data(), m, n);
      if (a.requires_grad()) {
        MMap(a.grad_buffer().data(), m, k).noalias() += gm * CMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MMap(b.grad_buffer().data(), k, n).noalias() += CMap(a.data().data(), m, k).transpose() * gm;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_rowvec(y, b) : y;
}

// ---------------------------------------------------------------------------
// Normalisation and activations

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t d = last_dim(x, "softmax_lastdim");
  const std::size_t rows = x.numel() / d;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double* y = o.data() + r * d;
    double mx = *std::max_element(in, in + d);
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) total += (y[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < d; ++i) y[i] /= total;
  }
  check_finite(out, "softmax_lastdim");
  if (Tape* tape = recording({&x})) {
    record(tape, "softmax_lastdim", {x}, out, [x, out, d, rows](std::span<const double> g) mutable {
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
        for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  const std::size_t rows = x.numel() / d;
  if (gain.defined() && gain.numel() != d) throw ShapeError("layer_norm: gain length mismatch");
  if (bias.defined() && bias.numel() != d) throw ShapeError("layer_norm: bias length mismatch");
  Tensor normed(x.shape());
  std::vector<double> inv_std(rows);
  auto xd = x.data();
  auto nd = normed.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) nd[r * d + i] = (in[i] - mu) * inv_std[r];
  }
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      double v = nd[r * d + i];
      if (gain.defined()) v *= gain[i];
      if (bias.defined()) v += bias[i];
      o[r * d + i] = v;
    }
  check_finite(out, "layer_norm");
  if (Tape* tape = recording({&x, &gain, &bias})) {
    record(tape, "layer_norm", {x}, out,
           [x, gain, bias, normed, inv_std = std::move(inv_std), d, rows](std::span<const double> g) mutable {
             auto nd = normed.data();
             if (gain.defined() && gain.requires_grad()) {
               auto gg = gain.grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * nd[r * d + i];
             }
             if (bias.defined() && bias.requires_grad()) {
               auto gb = bias.grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
             }
             if (!x.requires_grad()) return;
             auto gx = x.grad_buffer();
             std::vector<double> gn(d);
             for (std::size_t r = 0; r < rows; ++r) {
               double mean_g = 0.0, mean_gn = 0.0;
               for (std::size_t i = 0; i < d; ++i) {
                 gn[i] = g[r * d + i] * (gain.defined() ? gain[i] : 1.0);
                 mean_g += gn[i];
                 mean_gn += gn[i] * nd[r * d + i];
               }
               mean_g /= static_cast<double>(d);
               mean_gn /= static_cast<double>(d);
               for (std::size_t i = 0; i < d; ++i) {
                 gx[r * d + i] += inv_std[r] * (gn[i] - mean_g - nd[r * d + i] * mean_gn);
               }
             }
           });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
  check_finite(out, "gelu");
  if (Tape* tape = recording({&x})) {
    record(tape, "gelu", {x}, out, [x](std::span<const double> g) mutable {
      auto xd = x.data();
      auto gx = x.grad_buffer();
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double cdf = 0.5 * (1.0 + std::erf(xd[i] * std::numbers::sqrt2 / 2.0));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * xd[i] * xd[i]);
        gx[i] += g[i] * (cdf + xd[i] * pdf);
      }
    });
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] / (1.0 + std::exp(-xd[i]));
  check_finite(out, "silu");
  if (Tape* tape = recording({&x})) {
    record(tape, "silu", {x}, out, [x](std::span<const double> g) mutable {
      auto xd = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-xd[i]));
        gx[i] += g[i] * s * (1.0 + xd[i] * (1.0 - s));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total);
  check_finite(out, "sum");
  if (Tape* tape = recording({&x})) {
    record(tape, "sum", {x}, out, [x](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (double& v : gx) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.numel() == 0) throw ShapeError("mse of empty tensor");
  const double n = static_cast<double>(a.numel());
  auto x = a.data(), y = b.data();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += (x[i] - y[i]) * (x[i] - y[i]);
  Tensor out = Tensor::scalar(total / n);
  check_finite(out, "mse");
  if (Tape* tape = recording({&a, &b})) {
    record(tape, "mse", {a, b}, out, [a, b, n](std::span<const double> g) mutable {
      auto x = a.data(), y = b.data();
      const double k = 2.0 * g[0] / n;
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += k * (x[i] - y[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= k * (x[i] - y[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (Tape* tape = recording({&x})) {
    record(tape, "reshape", {x}, out, [x](std::span<const double> g) mutable { accumulate(x, g); });
  }
  return out;
}

Tensor detach(const Tensor& x) { return x.view(x.shape()); }

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm, Shape shape) {
  if (perm.size() != shape_numel(shape)) throw ShapeError("permute: index count does not match shape");
  Tensor out(std::move(shape));
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= xd.size()) throw ShapeError("permute: index out of range");
    o[i] = xd[perm[i]];
  }
  if (Tape* tape = recording({&x})) {
    record(tape, "permute", {x}, out, [x, perm](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < perm.size(); ++i) gx[perm[i]] += g[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_rank2(x, "gather_rows");
  const std::size_t n = x.dim(0), cols = x.dim(1);
  Tensor out(Shape{rows.size(), cols});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(xd.data() + rows[r] * cols, cols, o.data() + r * cols);
  }
  if (Tape* tape = recording({&x})) {
    record(tape, "gather_rows", {x}, out, [x, rows, cols](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[rows[r] * cols + c] += g[r * cols + c];
    });
  }
  return out;
}

Tensor repeat_rows(const Tensor& x, std::size_t n) {
  require_rank2(x, "repeat_rows");
  std::vector<std::size_t> rows;
  rows.reserve(x.dim(0) * n);
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t i = 0; i < n; ++i) rows.push_back(r);
  return gather_rows(x, rows);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  Tensor out(Shape{rows, cols});
  auto o = out.mutable_data();
  std::size_t offset = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
    any_grad |= p.requires_grad();
  }
  Tape* tape = active_tape();
  if (tape && any_grad) {
    record(tape, "concat_rows", parts, out, [parts](std::span<const double> g) mutable {
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) accumulate(p, g.subspan(offset, p.numel()));
        offset += p.numel();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
    any_grad |= p.requires_grad();
  }
  Tensor out(Shape{rows, cols});
  auto o = out.mutable_data();
  std::size_t start = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pd.data() + r * w, w, o.data() + r * cols + start);
    start += w;
  }
  Tape* tape = active_tape();
  if (tape && any_grad) {
    record(tape, "concat_cols", parts, out, [parts, rows, cols](std::span<const double> g) mutable {
      std::size_t start = 0;
      for (auto& p : parts) {
        const std::size_t w = p.dim(1);
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * cols + start + c];
        }
        start += w;
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t len) {
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start + len > cols) throw ShapeError("slice_cols: range out of bounds");
  Tensor out(Shape{rows, len});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xd.data() + r * cols + start, len, o.data() + r * len);
  if (Tape* tape = recording({&x})) {
    record(tape, "slice_cols", {x}, out, [x, rows, cols, start, len](std::span<const double> g) mutable {
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) gx[r * cols + start + c] += g[r * len + c];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s,
                 const std::vector<std::uint8_t>& key_mask, const Tensor* probs_override, Tensor* probs_out) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t B = s.batch, Nq = s.queries, Nk = s.keys, H = s.heads;
  const std::size_t D = q.dim(1), Dv = v.dim(1);
  if (q.dim(0) != B * Nq || k.dim(0) != B * Nk || v.dim(0) != B * Nk || k.dim(1) != D) {
    throw ShapeError("attention: packed shapes inconsistent with AttentionShape");
  }
  if (H == 0 || D % H != 0 || Dv % H != 0) throw ShapeError("attention: width not divisible by heads");
  if (!key_mask.empty() && key_mask.size() != B * Nk) throw ShapeError("attention: key mask size mismatch");
  const Shape probs_shape{B, H, Nq, Nk};
  if (probs_override && probs_override->shape() != probs_shape) {
    throw ShapeError("attention: recorded map shape " + shape_str(probs_override->shape()) + " expected " +
                     shape_str(probs_shape));
  }
  const std::size_t dh = D / H, dvh = Dv / H;
  const double scale_qk = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor probs = probs_override ? *probs_override : Tensor(probs_shape);
  Tensor out(Shape{B * Nq, Dv});
  auto pd = probs.mutable_data();
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  double* od = out.mutable_data().data();

  std::vector<std::uint8_t> has_key(B, 1);
  for (std::size_t b = 0; b < B; ++b) {
    if (key_mask.empty()) continue;
    has_key[b] = std::any_of(key_mask.begin() + static_cast<std::ptrdiff_t>(b * Nk),
                             key_mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * Nk),
                             [](std::uint8_t m) { return m != 0; });
  }

  for (std::size_t b = 0; b < B; ++b) {
    if (!has_key[b]) {
      if (!probs_override) {
        std::fill_n(pd.data() + b * H * Nq * Nk, H * Nq * Nk, 0.0);
      }
      continue;
    }
    for (std::size_t h = 0; h < H; ++h) {
      MMap P(pd.data() + ((b * H + h) * Nq) * Nk, Nq, Nk);
      if (!probs_override) {
        CStrided Q(qd + b * Nq * D + h * dh, Nq, dh, Stride(D));
        CStrided K(kd + b * Nk * D + h * dh, Nk, dh, Stride(D));
        P.noalias() = (Q * K.transpose()) * scale_qk;
        for (std::size_t i = 0; i < Nq; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < Nk; ++j) {
            if (!key_mask.empty() && !key_mask[b * Nk + j]) continue;
            mx = std::max(mx, P(i, j));
          }
          double total = 0.0;
          for (std::size_t j = 0; j < Nk; ++j) {
            if (!key_mask.empty() && !key_mask[b * Nk + j]) {
              P(i, j) = 0.0;
            } else {
              total += (P(i, j) = std::exp(P(i, j) - mx));
            }
          }
          for (std::size_t j = 0; j < Nk; ++j) P(i, j) /= total;
        }
      }
      CStrided V(vd + b * Nk * Dv + h * dvh, Nk, dvh, Stride(Dv));
      MStrided O(od + b * Nq * Dv + h * dvh, Nq, dvh, Stride(Dv));
      O.noalias() = P * V;
    }
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (!has_key[b]) std::fill_n(od + b * Nq * Dv, Nq * Dv, 0.0);
  }
  check_finite(out, "attention");
  if (probs_out) *probs_out = probs;

  const bool fixed = probs_override != nullptr;
  if (Tape* tape = recording({&q, &k, &v})) {
    record(tape, "attention", {q, k, v}, out,
           [q, k, v, probs, has_key, B, Nq, Nk, H, D, Dv, dh, dvh, scale_qk, fixed](std::span<const double> g) mutable {
             const double* pd = probs.data().data();
             const bool need_qk = !fixed && (q.requires_grad() || k.requires_grad());
             std::vector<double> dp(Nq * Nk);
             for (std::size_t b = 0; b < B; ++b) {
               if (!has_key[b]) continue;
               for (std::size_t h = 0; h < H; ++h) {
                 CMap P(pd + ((b * H + h) * Nq) * Nk, Nq, Nk);
                 CStrided dO(g.data() + b * Nq * Dv + h * dvh, Nq, dvh, Stride(Dv));
                 if (v.requires_grad()) {
                   MStrided dV(v.grad_buffer().data() + b * Nk * Dv + h * dvh, Nk, dvh, Stride(Dv));
                   dV.noalias() += P.transpose() * dO;
                 }
                 if (!need_qk) continue;
                 CStrided V(v.data().data() + b * Nk * Dv + h * dvh, Nk, dvh, Stride(Dv));
                 MMap dP(dp.data(), Nq, Nk);
                 dP.noalias() = dO * V.transpose();
                 for (std::size_t i = 0; i < Nq; ++i) {
                   double dot = 0.0;
                   for (std::size_t j = 0; j < Nk; ++j) dot += dP(i, j) * P(i, j);
                   for (std::size_t j = 0; j < Nk; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * scale_qk;
                 }
                 if (q.requires_grad()) {
                   CStrided K(k.data().data() + b * Nk * D + h * dh, Nk, dh, Stride(D));
                   MStrided dQ(q.grad_buffer().data() + b * Nq * D + h * dh, Nq, dh, Stride(D));
                   dQ.noalias() += dP * K;
                 }
                 if (k.requires_grad()) {
                   CStrided Q(q.data().data() + b * Nq * D + h * dh, Nq, dh, Stride(D));
                   MStrided dK(k.grad_buffer().data() + b * Nk * D + h * dh, Nk, dh, Stride(D));
                   dK.noalias() += dP.transpose() * Q;
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

Tensor conv2d(const Tensor& x, const Tensor& kernels, const Tensor& bias, const ConvGeometry& geom) {
  require_rank2(x, "conv2d");
  require_rank2(kernels, "conv2d");
  const std::size_t B = geom.batch, Hh = geom.height, W = geom.width, C = geom.channels, K = geom.kernel;
  if (x.dim(0) != B * Hh * W || x.dim(1) != C) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " does not match geometry");
  }
  if (kernels.dim(0) != K * K * C) throw ShapeError("conv2d: kernel rows must equal k*k*C");
  if (geom.stride == 0 || Hh + 2 * geom.pad < K || W + 2 * geom.pad < K) throw ShapeError("conv2d: invalid geometry");
  const std::size_t Cout = kernels.dim(1);
  if (bias.defined() && bias.numel() != Cout) throw ShapeError("conv2d: bias length mismatch");
  const std::size_t Ho = geom.out_height(), Wo = geom.out_width();
  const std::size_t patch = K * K * C;

  // im2col; -1 marks padding.
  std::vector<std::ptrdiff_t> src(B * Ho * Wo * K * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) - static_cast<std::ptrdiff_t>(geom.pad);
            const auto ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) - static_cast<std::ptrdiff_t>(geom.pad);
            const std::size_t slot = (((b * Ho + oy) * Wo + ox) * K + ky) * K + kx;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(Hh) &&
                                ix < static_cast<std::ptrdiff_t>(W);
            src[slot] = inside ? static_cast<std::ptrdiff_t>((b * Hh + static_cast<std::size_t>(iy)) * W +
                                                             static_cast<std::size_t>(ix))
                               : -1;
          }
  RowMat cols(B * Ho * Wo, patch);
  auto xd = x.data();
  for (std::size_t r = 0; r < B * Ho * Wo; ++r)
    for (std::size_t kk = 0; kk < K * K; ++kk) {
      const auto s = src[r * K * K + kk];
      double* dst = cols.data() + r * patch + kk * C;
      if (s < 0) {
        std::fill_n(dst, C, 0.0);
      } else {
        std::copy_n(xd.data() + static_cast<std::size_t>(s) * C, C, dst);
      }
    }

  Tensor out(Shape{B * Ho * Wo, Cout});
  MMap o(out.mutable_data().data(), B * Ho * Wo, Cout);
  o.noalias() = cols * CMap(kernels.data().data(), patch, Cout);
  if (bias.defined()) {
    for (std::size_t r = 0; r < B * Ho * Wo; ++r)
      for (std::size_t c = 0; c < Cout; ++c) o(r, c) += bias[c];
  }
  check_finite(out, "conv2d");
  if (Tape* tape = recording({&x, &kernels, &bias})) {
    record(tape, "conv2d", {x, kernels}, out,
           [x, kernels, bias, cols = std::move(cols), src = std::move(src), B, Ho, Wo, K, C, Cout,
            patch](std::span<const double> g) mutable {
             CMap gm(g.data(), B * Ho * Wo, Cout);
             if (kernels.requires_grad()) {
               MMap(kernels.grad_buffer().data(), patch, Cout).noalias() += cols.transpose() * gm;
             }
             if (bias.defined() && bias.requires_grad()) {
               auto gb = bias.grad_buffer();
               for (std::size_t r = 0; r < B * Ho * Wo; ++r)
                 for (std::size_t c = 0; c < Cout; ++c) gb[c] += gm(r, c);
             }
             if (!x.requires_grad()) return;
             RowMat dcols = gm * CMap(kernels.data().data(), patch, Cout).transpose();
             auto gx = x.grad_buffer();
             for (std::size_t r = 0; r < B * Ho * Wo; ++r)
               for (std::size_t kk = 0; kk < K * K; ++kk) {
                 const auto s = src[r * K * K + kk];
                 if (s < 0) continue;
                 const double* d = dcols.data() + r * patch + kk * C;
                 double* dst = gx.data() + static_cast<std::size_t>(s) * C;
                 for (std::size_t c = 0; c < C; ++c) dst[c] += d[c];
               }
           });
  }
  return out;
}

}  // namespace mupad::ops
