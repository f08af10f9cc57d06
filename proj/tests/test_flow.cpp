#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mupad/flow.hpp"
#include "mupad/model.hpp"
#include "mupad/ops.hpp"

using namespace mupad;
using namespace mupad::flow;

namespace {

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

double l2(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

VelocityFn constant_field(const Tensor& v) {
  return [v](const Tensor&, double, const ConditionBatch&, std::size_t) { return v.clone(); };
}

/// Smooth nonlinear field v(z,t) = tanh(A z) * (1 + t) + b.
VelocityFn smooth_field(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor a = Tensor::randn({n, n}, rng, 1.0 / std::sqrt(static_cast<double>(n)));
  Tensor b = Tensor::randn({n}, rng, 0.5);
  return [a, b, n](const Tensor& z, double t, const ConditionBatch&, std::size_t) {
    Tensor out(z.shape());
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * z[j];
      o[i] = std::tanh(s) * (1.0 + t) + b[i];
    }
    return out;
  };
}

const ConditionBatch kOne = null_conditions(1);

}  // namespace

TEST_CASE("interpolate endpoints and arithmetic") {
  Rng rng(1);
  for (Shape s : {Shape{3}, Shape{2, 3, 4}, Shape{1, 48, 8, 8}}) {
    Tensor x0 = Tensor::randn(s, rng), eps = Tensor::randn(s, rng);
    auto a = interpolate(x0, eps, 0.0);
    auto b = interpolate(x0, eps, 1.0);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      CHECK(a.x_t[i] == x0[i]);
      CHECK(b.x_t[i] == eps[i]);
    }
  }
  auto r = interpolate(Tensor({1}, 0.0), Tensor({1}, 2.0), 0.5);
  CHECK(r.x_t[0] == 1.0);
  CHECK(r.v_target[0] == 2.0);

  Tensor x0 = Tensor::randn({4}, rng), eps = Tensor::randn({4}, rng);
  auto p = interpolate(x0, eps, 0.2), q = interpolate(x0, eps, 0.9);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p.v_target[i] == q.v_target[i]);

  CHECK_THROWS_AS(interpolate(x0, eps, -0.1), Error);
  CHECK_THROWS_AS(interpolate(x0, eps, 1.5), Error);
  CHECK_THROWS_AS(interpolate(x0, Tensor({5}), 0.5), ShapeError);
}

TEST_CASE("batched interpolate uses one t per sample") {
  Rng rng(2);
  Tensor x0 = Tensor::randn({3, 2, 2}, rng), eps = Tensor::randn({3, 2, 2}, rng);
  auto r = interpolate(x0, eps, std::vector<double>{0.0, 0.5, 1.0});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.x_t[i] == x0[i]);
    CHECK(r.x_t[4 + i] == doctest::Approx(0.5 * x0[4 + i] + 0.5 * eps[4 + i]).epsilon(1e-15));
    CHECK(r.x_t[8 + i] == eps[8 + i]);
  }
  CHECK_THROWS_AS(interpolate(x0, eps, std::vector<double>{0.1, 0.2}), ShapeError);
}

TEST_CASE("guided velocity") {
  Tensor vc({2}, std::vector<double>{1.0, -3.0}), vu({2}, std::vector<double>{0.5, 2.0});
  auto w0 = guided_velocity(vc, vu, 0.0), w1 = guided_velocity(vc, vu, 1.0);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(w0[i] == vu[i]);
    CHECK(w1[i] == vc[i]);
  }
  CHECK(guided_velocity(Tensor({1}, 1.0), Tensor({1}, 0.0), 2.5)[0] == 2.5);
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    Tensor v = Tensor::randn({6}, rng);
    const double w = std::uniform_real_distribution<double>(-5, 5)(rng);
    auto g = guided_velocity(v, v, w);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == v[i]);
  }
}

TEST_CASE("guidance schedule") {
  GuidanceSchedule s;
  CHECK(s.at(0.0) == 2.5);
  CHECK(s.at(1.0) == 0.0);
  CHECK(s.at(0.5) == doctest::Approx(1.25));
  CHECK(s.at_step(0, 250) == 2.5);
  CHECK(s.at_step(249, 250) == 0.0);
  CHECK(GuidanceSchedule::constant(1.0).at(0.3) == 1.0);
  CHECK(SamplerConfig{}.steps == 250);
}

TEST_CASE("constant field ODE, SDE and inversion") {
  Rng rng(4);
  Tensor v = Tensor::randn({5}, rng), zT = Tensor::randn({5}, rng);
  auto model = constant_field(v);
  for (std::size_t steps : {1u, 7u, 250u}) {
    SamplerConfig cfg{steps, SamplerMode::ode, 0.0, 0};
    Tensor z0 = sample_ode(model, zT, kOne, cfg, GuidanceSchedule::constant(1.0));
    Tensor back = ddim_invert(model, zT, kOne, steps);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(z0[i] == doctest::Approx(zT[i] - v[i]).epsilon(1e-12));
      CHECK(back[i] == doctest::Approx(zT[i] + v[i]).epsilon(1e-12));
    }
  }
  // One Euler step.
  auto field = smooth_field(5, 9);
  Tensor one = sample_ode(field, zT, kOne, {1, SamplerMode::ode, 0.0, 0}, GuidanceSchedule::constant(1.0));
  Tensor v1 = field(zT, 1.0, kOne, 0);
  for (std::size_t i = 0; i < 5; ++i) CHECK(one[i] == doctest::Approx(zT[i] - v1[i]).epsilon(1e-14));
}

TEST_CASE("guidance weight 1 and 0 skip the other branch") {
  std::size_t cond_calls = 0, null_calls = 0;
  VelocityFn model = [&](const Tensor& z, double, const ConditionBatch& c, std::size_t) {
    (c[0].active_count() > 0 ? cond_calls : null_calls)++;
    return Tensor(z.shape(), 0.0);
  };
  ConditionBatch cond(1);
  cond[0].set_text({1, 2});
  SamplerConfig cfg{10, SamplerMode::ode, 0.0, 0};
  sample_ode(model, Tensor({2}, 1.0), cond, cfg, GuidanceSchedule::constant(1.0));
  CHECK(cond_calls == 10);
  CHECK(null_calls == 0);
  cond_calls = 0;
  sample_ode(model, Tensor({2}, 1.0), cond, cfg, GuidanceSchedule::constant(0.0));
  CHECK(cond_calls == 0);
  CHECK(null_calls == 10);
  null_calls = 0;
  sample_ode(model, Tensor({2}, 1.0), cond, cfg, GuidanceSchedule{});
  // First step w=2.5 evaluates both, last step w=0 only the null branch.
  CHECK(null_calls == 10);
  CHECK(cond_calls == 9);
}

TEST_CASE("ODE sampler converges at first order") {
  auto field = smooth_field(8, 11);
  Rng rng(12);
  Tensor zT = Tensor::randn({8}, rng);
  const auto sched = GuidanceSchedule::constant(1.0);
  Tensor ref = sample_ode(field, zT, kOne, {10000, SamplerMode::ode, 0.0, 0}, sched);
  std::vector<double> lx, ly;
  double prev = 1e300;
  for (std::size_t steps : {25u, 50u, 100u, 200u}) {
    const double err = l2(sample_ode(field, zT, kOne, {steps, SamplerMode::ode, 0.0, 0}, sched), ref);
    CHECK(err < prev);
    prev = err;
    lx.push_back(std::log(static_cast<double>(steps)));
    ly.push_back(std::log(err));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / 4, my = std::accumulate(ly.begin(), ly.end(), 0.0) / 4;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double order = -sxy / sxx;
  MESSAGE("observed order " << order);
  CHECK(order >= 0.7);
  CHECK(order <= 1.3);
}

TEST_CASE("SDE sampler determinism and degenerate noise") {
  auto field = smooth_field(6, 21);
  Rng rng(22);
  Tensor zT = Tensor::randn({6}, rng);
  const auto sched = GuidanceSchedule::constant(1.0);
  SamplerConfig cfg{50, SamplerMode::sde, 1.0, 77};
  Tensor a = sample(field, zT, kOne, cfg, sched), b = sample(field, zT, kOne, cfg, sched);
  for (std::size_t i = 0; i < 6; ++i) CHECK(a[i] == b[i]);
  cfg.seed = 78;
  CHECK(l2(sample(field, zT, kOne, cfg, sched), a) > 0.0);

  SamplerConfig zero{50, SamplerMode::sde, 0.0, 5};
  Tensor s = sample_sde(field, zT, kOne, zero, sched);
  Tensor o = sample_ode(field, zT, kOne, {50, SamplerMode::ode, 0.0, 0}, sched);
  for (std::size_t i = 0; i < 6; ++i) CHECK(s[i] == o[i]);
  CHECK_THROWS_AS(sample_sde(field, zT, kOne, {50, SamplerMode::sde, -1.0, 0}, sched), Error);
}

TEST_CASE("SDE output variance grows with noise scale") {
  auto field = smooth_field(4, 31);
  Rng rng(32);
  Tensor zT = Tensor::randn({4}, rng);
  const auto sched = GuidanceSchedule::constant(1.0);
  double prev = -1.0;
  for (double ns : {0.0, 0.1, 0.3, 1.0}) {
    std::vector<Tensor> outs;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      outs.push_back(sample_sde(field, zT, kOne, {50, SamplerMode::sde, ns, seed}, sched));
    }
    double var = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      double m = 0.0, m2 = 0.0;
      for (const auto& o : outs) m += o[i] / 100.0;
      for (const auto& o : outs) m2 += (o[i] - m) * (o[i] - m) / 99.0;
      var += m2;
    }
    MESSAGE("noise_scale " << ns << " variance " << var);
    CHECK(var > prev);
    prev = var;
  }
}

TEST_CASE("non-finite trajectory aborts with the step index") {
  VelocityFn bad = [](const Tensor& z, double t, const ConditionBatch&, std::size_t) {
    return Tensor(z.shape(), t < 0.5 ? std::nan("") : 0.0);
  };
  try {
    sample_ode(bad, Tensor({2}, 0.0), kOne, {10, SamplerMode::ode, 0.0, 0}, GuidanceSchedule::constant(1.0));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 6") != std::string::npos);
  }
}

TEST_CASE("inversion round trip on a seeded transformer") {
  ModelConfig mc;
  mc.depth = 2;
  mc.zero_init = false;
  DiffusionTransformer net(mc, 123);
  ConditionBatch cond(1);
  cond[0].set_text({3, 4, 5});
  VelocityFn model = [&](const Tensor& z, double t, const ConditionBatch& c, std::size_t) {
    return net.forward(z, {t}, c).v_patch;
  };
  Rng rng(5);
  Tensor z0 = Tensor::randn({1, mc.latent_channels, mc.latent_height, mc.latent_width}, rng);
  auto round_trip = [&](std::size_t steps) {
    Tensor zT = ddim_invert(model, z0, cond, steps);
    Tensor rec = sample_ode(model, zT, cond, {steps, SamplerMode::ode, 0.0, 0}, GuidanceSchedule::constant(1.0));
    return rel_l2(rec, z0);
  };
  const double e25 = round_trip(25), e200 = round_trip(200);
  MESSAGE("round trip error: 25 steps " << e25 << ", 200 steps " << e200);
  CHECK(e200 < 5e-2);
  CHECK(e200 < e25);
}
