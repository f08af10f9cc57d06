#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  AdamWConfig hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamWState for_params(const AdamWConfig& hyper, std::span<const Tensor> params);
};

/// One AdamW update with decoupled (multiplicative) weight decay:
///   theta <- theta * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// `grads[i]` may be empty, meaning a zero gradient. Throws NumericError on a
/// non-finite gradient before touching any parameter.
void adamw_step(AdamWState& state, std::span<Tensor> params, std::span<const std::span<const double>> grads);
/// Same, reading gradients from the parameters' own buffers.
void adamw_step(AdamWState& state, std::span<Tensor> params);

struct EmaState {
  double decay = 0.9999;
  std::vector<Tensor> shadow;

  static EmaState for_params(std::span<const Tensor> params, double decay = 0.9999);
};

/// shadow <- decay*shadow + (1-decay)*param
void ema_update(EmaState& ema, std::span<const Tensor> params);

}  // namespace mupad
