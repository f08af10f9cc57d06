#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mupad/condition.hpp"
#include "mupad/tensor.hpp"

/// Linear stochastic interpolant x_t = (1-t) x0 + t eps (t=0 data, t=1
/// noise), its velocity target, and the samplers built on it.
namespace mupad::flow {

struct Interpolant {
  Tensor x_t;
  Tensor v_target;
};

inline double path_alpha(double t) { return 1.0 - t; }
inline double path_sigma(double t) { return t; }

Interpolant interpolate(const Tensor& x0, const Tensor& eps, double t);
/// Batched form: the leading dimension indexes samples, one t per sample.
Interpolant interpolate(const Tensor& x0, const Tensor& eps, const std::vector<double>& t);

/// v_uncond + w * (v_cond - v_uncond)
Tensor guided_velocity(const Tensor& v_cond, const Tensor& v_uncond, double w);

struct GuidanceSchedule {
  enum class Shape { linear };
  double w_start = 2.5;
  double w_end = 0.0;
  Shape shape = Shape::linear;

  static GuidanceSchedule constant(double w) { return {w, w, Shape::linear}; }
  /// Weight at normalised progress u in [0,1].
  double at(double u) const;
  /// Weight at solver step `step` of `steps` (u = step/(steps-1)).
  double at_step(std::size_t step, std::size_t steps) const;
};

enum class SamplerMode { ode, sde };

struct SamplerConfig {
  std::size_t steps = 250;
  SamplerMode mode = SamplerMode::sde;
  /// Diffusion g(t)^2 = 2 * noise_scale * sigma(t).
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

/// Model velocity for a batch `z` at time t. `step` is the solver step index,
/// which lets callers key recorded activations to the trajectory.
using VelocityFn =
    std::function<Tensor(const Tensor& z, double t, const ConditionBatch& cond, std::size_t step)>;

/// Euler integration of dz/dt = v from t=1 down to t=0 on a uniform grid,
/// with classifier-free guidance weights from `sched`.
Tensor sample_ode(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
                  const GuidanceSchedule& sched);

/// Euler-Maruyama on the reverse SDE sharing the ODE's marginals. Noise is
/// injected at every step except the last; deterministic given cfg.seed.
Tensor sample_sde(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
                  const GuidanceSchedule& sched);

/// Dispatches on cfg.mode.
Tensor sample(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
              const GuidanceSchedule& sched);

/// Deterministic forward Euler traversal t: 0 -> 1 with the unguided
/// conditional velocity (w = 1), on the same grid sample_ode uses.
Tensor ddim_invert(const VelocityFn& model, const Tensor& z0, const ConditionBatch& cond, std::size_t steps);

}  // namespace mupad::flow
