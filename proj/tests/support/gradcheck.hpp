#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central-difference oracle. `loss_fn` must rebuild the scalar loss from the
/// current contents of `params` on every call. Checks at most `max_per_param`
/// evenly spaced entries per parameter.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                 double h = 1e-5, std::size_t max_per_param = 64, double floor = 1e-6) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult result;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    const std::size_t n = p.numel();
    const std::size_t stride = std::max<std::size_t>(1, n / max_per_param);
    for (std::size_t i = 0; i < n; i += stride) {
      auto d = p.mutable_data();
      const double orig = d[i];
      d[i] = orig + h;
      const double up = loss_fn().item();
      d[i] = orig - h;
      const double down = loss_fn().item();
      d[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      ++result.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace mupad::testing
