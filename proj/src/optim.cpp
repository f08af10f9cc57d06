#include "mupad/optim.hpp"

#include <cmath>

namespace mupad {

AdamWState AdamWState::for_params(const AdamWConfig& hyper, std::span<const Tensor> params) {
  AdamWState s;
  s.hyper = hyper;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adamw_step(AdamWState& state, std::span<Tensor> params, std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adamw_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) throw ShapeError("adamw_step: moment buffer shape mismatch");
    if (!grads[i].empty() && grads[i].size() != params[i].numel()) {
      throw ShapeError("adamw_step: gradient shape mismatch");
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient");
    }
  }

  const auto& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const double decay = 1.0 - h.lr * h.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] = theta[j] * decay - h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

void adamw_step(AdamWState& state, std::span<Tensor> params) {
  std::vector<std::span<const double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adamw_step(state, params, grads);
}

EmaState EmaState::for_params(std::span<const Tensor> params, double decay) {
  if (!(decay > 0.0 && decay < 1.0)) throw Error("EMA decay must lie in (0,1)");
  EmaState ema;
  ema.decay = decay;
  for (const auto& p : params) {
    Tensor copy = p.clone();
    copy.set_requires_grad(false);
    ema.shadow.push_back(copy);
  }
  return ema;
}

void ema_update(EmaState& ema, std::span<const Tensor> params) {
  if (!(ema.decay > 0.0 && ema.decay < 1.0)) throw Error("EMA decay must lie in (0,1)");
  if (params.size() != ema.shadow.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != ema.shadow[i].shape()) throw ShapeError("ema_update: shape mismatch");
    auto s = ema.shadow[i].mutable_data();
    auto p = params[i].data();
    for (std::size_t j = 0; j < s.size(); ++j) s[j] = ema.decay * s[j] + (1.0 - ema.decay) * p[j];
  }
}

}  // namespace mupad
