#include <cmath>
#include <map>

#include "doctest.h"
#include "mupad/encoder.hpp"
#include "mupad/flow.hpp"
#include "mupad/imaging.hpp"
#include "mupad/objectives.hpp"
#include "mupad/ops.hpp"

using namespace mupad;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.zero_init = false;
  c.mlp_ratio = 2;
  return c;
}

double direct_mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.numel());
}

double grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

struct Fixture {
  ModelConfig mc = small_model();
  DiffusionTransformer net{mc, 21};
  StubEncoder teacher = make_teacher_encoder();
  StubEncoder cond_enc = make_condition_encoder();
  Rng rng{22};
  Tensor images = Tensor::uniform({2, 3, 32, 32}, rng, 0.0, 1.0);
  Tensor x0 = to_model_space(latent_encode(images));
  Tensor eps = Tensor::randn(x0.shape(), rng);
  Tensor teacher_grid = teacher.encode_grid(images);
  Tensor cls_target;
  ConditionBatch cond;

  Fixture() {
    cls_target = Tensor({2, 32});
    for (std::size_t b = 0; b < 2; ++b) {
      Tensor img = Tensor({3, 32, 32}, std::vector<double>(images.data().begin() + b * 3072,
                                                          images.data().begin() + (b + 1) * 3072));
      auto e = cond_enc.encode(img);
      std::copy(e.cls.data().begin(), e.cls.data().end(), cls_target.mutable_data().begin() + b * 32);
      ConditionSet cs;
      cs.set_image(e.tokens);
      cs.set_text({1, 4});
      cond.push_back(cs);
    }
  }

  DenoiserOutput forward() {
    auto path = flow::interpolate(x0, eps, std::vector<double>{0.3, 0.7});
    ForwardOptions opts;
    opts.keep_features = true;
    return net.forward(path.x_t, {0.3, 0.7}, cond, opts);
  }
  Tensor target() { return flow::interpolate(x0, eps, std::vector<double>{0.3, 0.7}).v_target; }
};

}  // namespace

TEST_CASE("denoise loss") {
  DenoiserOutput out;
  out.v_patch = Tensor({1}, 0.0);
  out.v_cls = Tensor({1}, 1.0);
  CHECK(denoise_loss(out, Tensor({1}, 2.0), Tensor({1}, 1.0), {1.0, 0.1, 0.5}).item() == doctest::Approx(4.0));
  CHECK(denoise_loss(out, Tensor({1}, 0.0), Tensor({1}, 1.0), {}).item() == 0.0);
  CHECK(denoise_loss(out, Tensor({1}, 2.0), Tensor({1}, 7.0), {1.0, 0.0, 0.0}).item() == 4.0);
  CHECK(denoise_loss(out, Tensor({1}, 1.0), Tensor({1}, 3.0), {1.0, 0.1, 0.0}).item() ==
        doctest::Approx(1.0 + 0.1 * 4.0));
  CHECK_THROWS_AS(denoise_loss(out, Tensor({2}, 0.0), Tensor({1}, 1.0), {}), ShapeError);
}

TEST_CASE("CNN alignment loss") {
  Fixture f;
  AlignProjector proj(f.mc.dim, f.teacher.width(), f.mc.grid_height(), f.mc.grid_width(), 5);
  auto out = f.forward();
  Tensor projected = proj.forward(out.features[0], 2);
  CHECK(projected.shape() == f.teacher_grid.shape());
  CHECK(align_loss(out.features[0], proj, projected, 2).item() == 0.0);
  CHECK(align_loss(out.features[0], proj, f.teacher_grid, 2).item() ==
        doctest::Approx(direct_mse(projected, f.teacher_grid)).epsilon(1e-14));

  const std::string digest = f.teacher.weight_digest();
  {
    Tape tape;
    TapeScope scope(tape);
    auto o = f.forward();
    backward(align_loss(o.features[0], proj, f.teacher_grid, 2));
  }
  CHECK(grad_norm(f.net.params().tensors()) > 0.0);
  CHECK(grad_norm(proj.params().tensors()) > 0.0);
  for (const auto& w : f.teacher.weights()) CHECK_FALSE(w.has_grad());
  CHECK(f.teacher.weight_digest() == digest);

  AlignProjector wrong(f.mc.dim, f.teacher.width() + 1, f.mc.grid_height(), f.mc.grid_width(), 5);
  CHECK_THROWS_AS(align_loss(out.features[0], wrong, f.teacher_grid, 2), ShapeError);
}

TEST_CASE("REPA alignment loss") {
  Fixture f;
  RepaProjector mlp(f.mc.dim, f.teacher.width(), 6);
  AlignProjector cnn(f.mc.dim, f.teacher.width(), f.mc.grid_height(), f.mc.grid_width(), 6);
  auto out = f.forward();
  Tensor p = mlp.forward(out.features[0]);
  CHECK(p.dim(0) == out.features[0].dim(0));
  CHECK(repa_align_loss(out.features[0], mlp, p).item() == 0.0);
  CHECK(repa_align_loss(out.features[0], mlp, f.teacher_grid).item() ==
        doctest::Approx(direct_mse(p, f.teacher_grid)).epsilon(1e-14));
  MESSAGE("projector parameters: cnn " << cnn.params().scalar_count() << ", mlp " << mlp.params().scalar_count());
  CHECK(cnn.params().scalar_count() != mlp.params().scalar_count());
}

TEST_CASE("total loss composition across arms") {
  Fixture f;
  const LossWeights w;
  std::map<AlignArm, std::map<std::string, std::size_t>> op_counts;
  std::map<AlignArm, std::size_t> forward_nodes;
  const std::vector<std::string> ops_seen{"conv2d", "matmul", "add_rowvec", "gelu", "mse", "attention",
                                          "layer_norm", "add", "mul", "scale"};
  for (AlignArm arm : {AlignArm::mupad, AlignArm::repa, AlignArm::naive}) {
    Aligner al(arm, f.mc, f.teacher.width(), 9, default_align_layer(f.mc.depth));
    f.net.params().zero_grad();
    Tape tape;
    TapeScope scope(tape);
    auto out = f.forward();
    forward_nodes[arm] = tape.size();
    auto terms = total_loss(out, f.target(), f.cls_target, f.teacher_grid, al, w);
    for (const auto& op : ops_seen) op_counts[arm][op] = tape.count(op);
    CHECK(terms.total.item() ==
          doctest::Approx(w.patch * terms.patch + w.cls * terms.cls + w.align * terms.align).epsilon(1e-13));
    CHECK(terms.patch > 0.0);
    CHECK(terms.cls > 0.0);
    if (arm == AlignArm::naive) {
      CHECK(terms.align == 0.0);
      CHECK(tape.count("conv2d") == 0);
      CHECK(al.params().size() == 0);
    } else {
      CHECK(terms.align > 0.0);
    }
    tape.backward(terms.total);
    CHECK(grad_norm(f.net.params().tensors()) > 0.0);
    if (arm != AlignArm::naive) CHECK(grad_norm(al.params().tensors()) > 0.0);
  }
  // Denoiser graph identical; only the projector ops differ.
  CHECK(forward_nodes[AlignArm::mupad] == forward_nodes[AlignArm::repa]);
  CHECK(forward_nodes[AlignArm::mupad] == forward_nodes[AlignArm::naive]);
  CHECK(op_counts[AlignArm::mupad]["conv2d"] == 2);
  CHECK(op_counts[AlignArm::repa]["conv2d"] == 0);
  CHECK(op_counts[AlignArm::repa]["matmul"] == op_counts[AlignArm::naive]["matmul"] + 2);
  CHECK(op_counts[AlignArm::mupad]["matmul"] == op_counts[AlignArm::naive]["matmul"]);
  for (const auto& op : {"attention", "layer_norm", "mul"}) {
    CHECK(op_counts[AlignArm::mupad][op] == op_counts[AlignArm::naive][op]);
    CHECK(op_counts[AlignArm::repa][op] == op_counts[AlignArm::naive][op]);
  }
}

TEST_CASE("per-term gradient probe") {
  Fixture f;
  Aligner al(AlignArm::mupad, f.mc, f.teacher.width(), 9, 0);
  auto probe = [&](LossWeights w) {
    f.net.params().zero_grad();
    al.params().zero_grad();
    Tape tape;
    TapeScope scope(tape);
    auto out = f.forward();
    tape.backward(total_loss(out, f.target(), f.cls_target, f.teacher_grid, al, w).total);
    return grad_norm(f.net.params().tensors());
  };
  CHECK(probe({1.0, 0.0, 0.0}) > 0.0);
  CHECK(probe({0.0, 1.0, 0.0}) > 0.0);
  CHECK(probe({0.0, 0.0, 1.0}) > 0.0);
}

TEST_CASE("total loss is zero at perfect predictions") {
  Fixture f;
  Aligner naive(AlignArm::naive, f.mc, f.teacher.width(), 9, 0);
  auto out = f.forward();
  CHECK(total_loss(out, out.v_patch, out.v_cls, f.teacher_grid, naive, {}).total.item() == 0.0);
  Aligner repa(AlignArm::repa, f.mc, f.teacher.width(), 9, 0);
  // The aligner's own projection is a perfect teacher.
  Tensor proj_out = ops::linear(ops::gelu(ops::linear(out.features[0], repa.params().get("mlp.w1"),
                                                      repa.params().get("mlp.b1"))),
                                repa.params().get("mlp.w2"), repa.params().get("mlp.b2"));
  CHECK(total_loss(out, out.v_patch, out.v_cls, proj_out, repa, {}).total.item() == 0.0);
}

TEST_CASE("condition dropout") {
  Rng rng(30);
  ConditionSet full;
  full.set_image(Tensor({4, 32}, 1.0));
  full.set_text({1, 2});
  full.set_rna(Tensor({kPathwayCount}, 0.5));
  full.set_cls(Tensor({32}, 1.0));

  auto same = condition_dropout(full, 0.0, rng);
  CHECK(same.active == full.active);
  CHECK(same.text_ids == full.text_ids);
  auto none = condition_dropout(full, 1.0, rng);
  CHECK(none.active_count() == 0);
  CHECK_FALSE(none.present(Modality::rna));
  CHECK_THROWS_AS(condition_dropout(full, 1.5, rng), Error);

  const std::size_t n = 10000;
  std::vector<std::array<bool, 4>> dropped(n);
  std::array<std::size_t, 4> counts{};
  for (std::size_t i = 0; i < n; ++i) {
    auto c = condition_dropout(full, 0.1, rng);
    for (std::size_t m = 0; m < 4; ++m) {
      dropped[i][m] = !c.active[m];
      counts[m] += dropped[i][m];
    }
  }
  for (std::size_t m = 0; m < 4; ++m) {
    const double rate = static_cast<double>(counts[m]) / n;
    MESSAGE("modality " << m << " drop rate " << rate);
    CHECK(rate >= 0.08);
    CHECK(rate <= 0.12);
  }
  // Pairwise independence: 2x2 chi-square, df = 1, critical value 6.635 at p = 0.01.
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) {
      double table[2][2] = {{0, 0}, {0, 0}};
      for (const auto& d : dropped) table[d[a]][d[b]] += 1;
      double chi = 0.0;
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          const double row = table[i][0] + table[i][1], col = table[0][j] + table[1][j];
          const double expect = row * col / n;
          chi += (table[i][j] - expect) * (table[i][j] - expect) / expect;
        }
      CHECK(chi < 6.635);
    }
}

TEST_CASE("embedding flow loss fixed points") {
  EmbeddingFlowNet net(8, 1);
  CHECK(net.params().size() == 2 * EmbeddingFlowNet::kLayers);
  Rng rng(31);
  Tensor z0 = Tensor::randn({5, 8}, rng);
  // Zero-initialised output and identical endpoints: target velocity 0.
  CHECK(embedding_flow_loss(net, z0, z0, rng).item() == 0.0);
  // Output equal to z1 - z0 everywhere.
  Tensor shift = Tensor::randn({8}, rng);
  Tensor z1({5, 8});
  for (std::size_t i = 0; i < 40; ++i) z1.mutable_data()[i] = z0[i] + shift[i % 8];
  Tensor bias = net.params().get("flow5.b");
  for (std::size_t j = 0; j < 8; ++j) bias.mutable_data()[j] = z1[j] - z0[j];
  CHECK(embedding_flow_loss(net, z0, z1, rng).item() < 1e-28);
  CHECK_THROWS_AS(embedding_flow_loss(net, z0, Tensor({5, 7}), rng), ShapeError);
}
