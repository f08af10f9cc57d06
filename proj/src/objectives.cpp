#include "mupad/objectives.hpp"

#include <cmath>

#include "mupad/flow.hpp"
#include "mupad/ops.hpp"

namespace mupad {

std::string align_arm_name(AlignArm a) {
  switch (a) {
    case AlignArm::mupad: return "mupad";
    case AlignArm::repa: return "repa";
    case AlignArm::naive: return "naive";
  }
  return "?";
}

AlignArm parse_align_arm(const std::string& s) {
  if (s == "mupad") return AlignArm::mupad;
  if (s == "repa") return AlignArm::repa;
  if (s == "naive") return AlignArm::naive;
  throw Error("unknown alignment arm '" + s + "' (expected mupad, repa or naive)");
}

Tensor denoise_loss(const DenoiserOutput& out, const Tensor& v_star_patch, const Tensor& v_star_cls,
                    const LossWeights& w) {
  if (out.v_patch.shape() != v_star_patch.shape()) throw ShapeError("denoise_loss: patch target shape mismatch");
  Tensor loss = ops::scale(ops::mse(out.v_patch, v_star_patch), w.patch);
  if (w.cls != 0.0) {
    if (!v_star_cls.defined() || out.v_cls.shape() != v_star_cls.shape()) {
      throw ShapeError("denoise_loss: CLS target shape mismatch");
    }
    loss = ops::add(loss, ops::scale(ops::mse(out.v_cls, v_star_cls), w.cls));
  }
  return loss;
}

AlignProjector::AlignProjector(std::size_t in_dim, std::size_t out_dim, std::size_t grid_h, std::size_t grid_w,
                               std::uint64_t seed, std::size_t hidden)
    : in_(in_dim), hidden_(hidden ? hidden : in_dim), out_(out_dim), gh_(grid_h), gw_(grid_w) {
  Rng rng(derive_seed(seed, 0xc00));
  k1_ = params_.add("cnn.k1", init::xavier_uniform(9 * in_, hidden_, rng));
  b1_ = params_.add("cnn.b1", init::zeros({hidden_}));
  k2_ = params_.add("cnn.k2", init::xavier_uniform(9 * hidden_, out_, rng));
  b2_ = params_.add("cnn.b2", init::zeros({out_}));
}

Tensor AlignProjector::forward(const Tensor& features, std::size_t batch) const {
  if (features.rank() != 2 || features.dim(0) != batch * gh_ * gw_ || features.dim(1) != in_) {
    throw ShapeError("align projector: features " + shape_str(features.shape()) + " do not form a " +
                     std::to_string(gh_) + "x" + std::to_string(gw_) + " grid of width " + std::to_string(in_));
  }
  Tensor h = ops::gelu(ops::conv2d(features, k1_, b1_, {batch, gh_, gw_, in_, 3, 1, 1}));
  return ops::conv2d(h, k2_, b2_, {batch, gh_, gw_, hidden_, 3, 1, 1});
}

RepaProjector::RepaProjector(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed, std::size_t hidden) {
  Rng rng(derive_seed(seed, 0x3e9a));
  const std::size_t h = hidden ? hidden : in_dim;
  w1_ = params_.add("mlp.w1", init::xavier_uniform(in_dim, h, rng));
  b1_ = params_.add("mlp.b1", init::zeros({h}));
  w2_ = params_.add("mlp.w2", init::xavier_uniform(h, out_dim, rng));
  b2_ = params_.add("mlp.b2", init::zeros({out_dim}));
}

Tensor RepaProjector::forward(const Tensor& features) const {
  return ops::linear(ops::gelu(ops::linear(features, w1_, b1_)), w2_, b2_);
}

Tensor align_loss(const Tensor& features, const AlignProjector& proj, const Tensor& teacher_grid,
                  std::size_t batch) {
  Tensor p = proj.forward(features, batch);
  if (p.shape() != teacher_grid.shape()) {
    throw ShapeError("align_loss: projected grid " + shape_str(p.shape()) + " vs teacher " +
                     shape_str(teacher_grid.shape()));
  }
  return ops::mse(p, ops::detach(teacher_grid));
}

Tensor repa_align_loss(const Tensor& features, const RepaProjector& proj, const Tensor& teacher_grid) {
  Tensor p = proj.forward(features);
  if (p.shape() != teacher_grid.shape()) {
    throw ShapeError("repa_align_loss: projected tokens " + shape_str(p.shape()) + " vs teacher " +
                     shape_str(teacher_grid.shape()));
  }
  return ops::mse(p, ops::detach(teacher_grid));
}

Aligner::Aligner(AlignArm arm, const ModelConfig& mc, std::size_t teacher_width, std::uint64_t seed,
                 std::size_t layer)
    : arm_(arm), layer_(layer) {
  if (layer >= mc.depth) throw Error("alignment layer " + std::to_string(layer) + " exceeds model depth");
  if (arm == AlignArm::mupad) {
    cnn_ = std::make_unique<AlignProjector>(mc.dim, teacher_width, mc.grid_height(), mc.grid_width(), seed);
  } else if (arm == AlignArm::repa) {
    mlp_ = std::make_unique<RepaProjector>(mc.dim, teacher_width, seed);
  }
}

ParameterSet& Aligner::params() {
  if (cnn_) return cnn_->params();
  if (mlp_) return mlp_->params();
  return empty_;
}

const ParameterSet& Aligner::params() const {
  if (cnn_) return cnn_->params();
  if (mlp_) return mlp_->params();
  return empty_;
}

Tensor Aligner::loss(const std::vector<Tensor>& features, const Tensor& teacher_grid, std::size_t batch) const {
  if (arm_ == AlignArm::naive) return {};
  if (layer_ >= features.size()) throw Error("alignment needs features from layer " + std::to_string(layer_));
  if (cnn_) return align_loss(features[layer_], *cnn_, teacher_grid, batch);
  return repa_align_loss(features[layer_], *mlp_, teacher_grid);
}

LossTerms total_loss(const DenoiserOutput& out, const Tensor& v_star_patch, const Tensor& v_star_cls,
                     const Tensor& teacher_grid, const Aligner& aligner, const LossWeights& w) {
  LossTerms terms;
  Tensor patch = ops::mse(out.v_patch, v_star_patch);
  terms.patch = patch.item();
  Tensor total = ops::scale(patch, w.patch);
  if (w.cls != 0.0) {
    Tensor cls = ops::mse(out.v_cls, v_star_cls);
    terms.cls = cls.item();
    total = ops::add(total, ops::scale(cls, w.cls));
  }
  if (aligner.arm() != AlignArm::naive && w.align != 0.0) {
    Tensor al = aligner.loss(out.features, teacher_grid, out.v_patch.dim(0));
    terms.align = al.item();
    total = ops::add(total, ops::scale(al, w.align));
  }
  terms.total = total;
  return terms;
}

ConditionSet condition_dropout(const ConditionSet& c, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error("dropout probability must lie in [0,1]");
  ConditionSet out = c;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t m = 0; m < kModalityCount; ++m) {
    // One draw per slot regardless of presence keeps the RNG stream aligned.
    const double r = u(rng);
    if (r < p) out.drop(static_cast<Modality>(m));
  }
  return out;
}

EmbeddingFlowNet::EmbeddingFlowNet(std::size_t width, std::uint64_t seed, std::size_t hidden,
                                   std::size_t time_features)
    : width_(width), time_features_(time_features) {
  if (width == 0 || hidden == 0 || time_features % 2 != 0) throw Error("invalid embedding flow net size");
  Rng rng(derive_seed(seed, 0xf10e));
  for (std::size_t l = 0; l < kLayers; ++l) {
    const std::size_t in = l == 0 ? width + time_features : hidden;
    const std::size_t out = l + 1 == kLayers ? width : hidden;
    const std::string p = "flow" + std::to_string(l) + ".";
    w_.push_back(params_.add(p + "w", l + 1 == kLayers ? init::zeros({in, out}) : init::xavier_uniform(in, out, rng)));
    b_.push_back(params_.add(p + "b", init::zeros({out})));
  }
}

Tensor EmbeddingFlowNet::forward(const Tensor& z, const std::vector<double>& t) const {
  if (z.rank() != 2 || z.dim(1) != width_) throw ShapeError("embedding flow net: width mismatch");
  if (t.size() != z.dim(0)) throw ShapeError("embedding flow net: one t per row required");
  Tensor tf({t.size(), time_features_});
  auto o = tf.mutable_data();
  const std::size_t half = time_features_ / 2;
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double f = half > 1 ? std::pow(32.0, static_cast<double>(i) / static_cast<double>(half - 1)) : 1.0;
      o[b * time_features_ + i] = std::sin(f * t[b]);
      o[b * time_features_ + half + i] = std::cos(f * t[b]);
    }
  Tensor h = ops::concat_cols({z, tf});
  for (std::size_t l = 0; l < kLayers; ++l) {
    h = ops::linear(h, w_[l], b_[l]);
    if (l + 1 < kLayers) h = ops::silu(h);
  }
  return h;
}

Tensor embedding_flow_loss(const EmbeddingFlowNet& net, const Tensor& z0, const Tensor& z1,
                           const std::vector<double>& t) {
  if (z0.shape() != z1.shape() || z0.rank() != 2 || z0.dim(1) != net.width()) {
    throw ShapeError("embedding_flow_loss: embedding widths differ");
  }
  // Path from source (t=0) to target (t=1): reuse the interpolant with x0=z0, eps=z1.
  auto path = flow::interpolate(z0, z1, t);
  return ops::mse(net.forward(path.x_t, t), path.v_target);
}

Tensor embedding_flow_loss(const EmbeddingFlowNet& net, const Tensor& z0, const Tensor& z1, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> t(z0.dim(0));
  for (auto& x : t) x = u(rng);
  return embedding_flow_loss(net, z0, z1, t);
}

}  // namespace mupad
