#include "mupad/flow.hpp"

#include <cmath>
#include <string>

namespace mupad::flow {

namespace {

void check_t(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("interpolation time must lie in [0,1], got " + std::to_string(t));
}

void check_state(const Tensor& z, std::size_t step) {
  for (double v : z.data()) {
    if (!std::isfinite(v)) throw NumericError("solver state became non-finite at step " + std::to_string(step));
  }
}

Tensor velocity_at(const VelocityFn& model, const Tensor& z, double t, const ConditionBatch& cond,
                   std::size_t step, double w) {
  if (w == 1.0) return model(z, t, cond, step);
  const ConditionBatch null = null_conditions(cond.size());
  if (w == 0.0) return model(z, t, null, step);
  return guided_velocity(model(z, t, cond, step), model(z, t, null, step), w);
}

}  // namespace

Interpolant interpolate(const Tensor& x0, const Tensor& eps, double t) {
  check_t(t);
  if (x0.shape() != eps.shape()) throw ShapeError("interpolate: x0 and eps shapes differ");
  Tensor xt(x0.shape()), v(x0.shape());
  auto a = x0.data(), e = eps.data();
  auto xo = xt.mutable_data(), vo = v.mutable_data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    xo[i] = path_alpha(t) * a[i] + path_sigma(t) * e[i];
    vo[i] = e[i] - a[i];
  }
  // Exact endpoints regardless of rounding in the blend.
  if (t == 0.0) xt = x0.clone();
  if (t == 1.0) xt = eps.clone();
  return {xt, v};
}

Interpolant interpolate(const Tensor& x0, const Tensor& eps, const std::vector<double>& t) {
  if (x0.shape() != eps.shape()) throw ShapeError("interpolate: x0 and eps shapes differ");
  if (x0.rank() == 0 || x0.dim(0) != t.size()) throw ShapeError("interpolate: one t per sample required");
  const std::size_t per = x0.numel() / t.size();
  Tensor xt(x0.shape()), v(x0.shape());
  auto a = x0.data(), e = eps.data();
  auto xo = xt.mutable_data(), vo = v.mutable_data();
  for (std::size_t b = 0; b < t.size(); ++b) {
    check_t(t[b]);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      xo[i] = t[b] == 0.0 ? a[i] : t[b] == 1.0 ? e[i] : path_alpha(t[b]) * a[i] + path_sigma(t[b]) * e[i];
      vo[i] = e[i] - a[i];
    }
  }
  return {xt, v};
}

Tensor guided_velocity(const Tensor& v_cond, const Tensor& v_uncond, double w) {
  if (v_cond.shape() != v_uncond.shape()) throw ShapeError("guided_velocity: shape mismatch");
  Tensor out(v_cond.shape());
  auto c = v_cond.data(), u = v_uncond.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = u[i] + w * (c[i] - u[i]);
  return out;
}

double GuidanceSchedule::at(double u) const {
  switch (shape) {
    case Shape::linear: return w_start + (w_end - w_start) * u;
  }
  return w_start;
}

double GuidanceSchedule::at_step(std::size_t step, std::size_t steps) const {
  if (steps <= 1) return at(0.0);
  return at(static_cast<double>(step) / static_cast<double>(steps - 1));
}

Tensor sample_ode(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
                  const GuidanceSchedule& sched) {
  if (cfg.steps == 0) throw Error("sampler needs at least one step");
  Tensor z = z_T.clone();
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    Tensor v = velocity_at(model, z, t, cond, i, sched.at_step(i, cfg.steps));
    if (v.shape() != z.shape()) throw ShapeError("velocity shape does not match state");
    auto zd = z.mutable_data();
    auto vd = v.data();
    for (std::size_t j = 0; j < zd.size(); ++j) zd[j] -= dt * vd[j];
    check_state(z, i);
  }
  return z;
}

Tensor sample_sde(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
                  const GuidanceSchedule& sched) {
  if (cfg.noise_scale == 0.0) return sample_ode(model, z_T, cond, cfg, sched);
  if (cfg.noise_scale < 0.0) throw Error("noise_scale must be nonnegative");
  if (cfg.steps == 0) throw Error("sampler needs at least one step");
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal;
  Tensor z = z_T.clone();
  const double dt = 1.0 / static_cast<double>(cfg.steps);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    Tensor v = velocity_at(model, z, t, cond, i, sched.at_step(i, cfg.steps));
    if (v.shape() != z.shape()) throw ShapeError("velocity shape does not match state");
    auto zd = z.mutable_data();
    auto vd = v.data();
    const bool last = i + 1 == cfg.steps;
    const double diffusion = last ? 0.0 : std::sqrt(2.0 * cfg.noise_scale * path_sigma(t) * dt);
    for (std::size_t j = 0; j < zd.size(); ++j) {
      // eps_hat = z + (1-t) v; the score is -eps_hat / sigma(t).
      const double eps_hat = zd[j] + (1.0 - t) * vd[j];
      zd[j] -= dt * (vd[j] + cfg.noise_scale * eps_hat);
      if (!last) zd[j] += diffusion * normal(rng);
    }
    check_state(z, i);
  }
  return z;
}

Tensor sample(const VelocityFn& model, const Tensor& z_T, const ConditionBatch& cond, const SamplerConfig& cfg,
              const GuidanceSchedule& sched) {
  return cfg.mode == SamplerMode::ode ? sample_ode(model, z_T, cond, cfg, sched)
                                      : sample_sde(model, z_T, cond, cfg, sched);
}

Tensor ddim_invert(const VelocityFn& model, const Tensor& z0, const ConditionBatch& cond, std::size_t steps) {
  if (steps == 0) throw Error("inversion needs at least one step");
  Tensor z = z0.clone();
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    // Pair inversion step k with forward solver step (steps - 1 - k).
    Tensor v = model(z, t, cond, steps - 1 - k);
    if (v.shape() != z.shape()) throw ShapeError("velocity shape does not match state");
    auto zd = z.mutable_data();
    auto vd = v.data();
    for (std::size_t j = 0; j < zd.size(); ++j) zd[j] += dt * vd[j];
    check_state(z, k);
  }
  return z;
}

}  // namespace mupad::flow
