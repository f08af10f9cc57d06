#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mupad/condition.hpp"
#include "mupad/model.hpp"
#include "mupad/params.hpp"
#include "mupad/tensor.hpp"

namespace mupad {

struct LossWeights {
  double patch = 1.0;
  double cls = 0.1;
  double align = 0.5;
};

/// Alignment arm: CNN projector, per-token MLP projector, or none.
enum class AlignArm { mupad, repa, naive };
std::string align_arm_name(AlignArm a);
AlignArm parse_align_arm(const std::string& s);

/// λ_patch·MSE(v_patch, v*) + λ_cls·MSE(v_cls, v*_cls). A zero weight drops
/// its term from the graph.
Tensor denoise_loss(const DenoiserOutput& out, const Tensor& v_star_patch, const Tensor& v_star_cls,
                    const LossWeights& w);

/// Maps a denoiser feature grid [B*gh*gw, in] to the teacher grid
/// [B*gh*gw, out]: conv3x3 -> GELU -> conv3x3, channels-last.
class AlignProjector {
 public:
  AlignProjector(std::size_t in_dim, std::size_t out_dim, std::size_t grid_h, std::size_t grid_w,
                 std::uint64_t seed, std::size_t hidden = 0);
  Tensor forward(const Tensor& features, std::size_t batch) const;
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  std::size_t in_, hidden_, out_, gh_, gw_;
  ParameterSet params_;
  Tensor k1_, b1_, k2_, b2_;
};

/// Per-token two-layer perceptron to the teacher width.
class RepaProjector {
 public:
  RepaProjector(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed, std::size_t hidden = 0);
  Tensor forward(const Tensor& features) const;
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 private:
  ParameterSet params_;
  Tensor w1_, b1_, w2_, b2_;
};

/// MSE between the projected features and a constant teacher grid.
Tensor align_loss(const Tensor& features, const AlignProjector& proj, const Tensor& teacher_grid,
                  std::size_t batch);
Tensor repa_align_loss(const Tensor& features, const RepaProjector& proj, const Tensor& teacher_grid);

/// The alignment term selected by the arm, with its projector parameters.
class Aligner {
 public:
  Aligner(AlignArm arm, const ModelConfig& mc, std::size_t teacher_width, std::uint64_t seed,
          std::size_t layer);
  AlignArm arm() const { return arm_; }
  std::size_t layer() const { return layer_; }
  /// Undefined for the naive arm.
  Tensor loss(const std::vector<Tensor>& features, const Tensor& teacher_grid, std::size_t batch) const;
  ParameterSet& params();
  const ParameterSet& params() const;

 private:
  AlignArm arm_;
  std::size_t layer_;
  ParameterSet empty_;
  std::unique_ptr<AlignProjector> cnn_;
  std::unique_ptr<RepaProjector> mlp_;
};

/// Default alignment tap: the middle block.
inline std::size_t default_align_layer(std::size_t depth) { return (depth - 1) / 2; }

struct LossTerms {
  Tensor total;
  double patch = 0.0;
  double cls = 0.0;
  double align = 0.0;
};

/// denoise_loss + λ_align·(arm-specific alignment term).
LossTerms total_loss(const DenoiserOutput& out, const Tensor& v_star_patch, const Tensor& v_star_cls,
                     const Tensor& teacher_grid, const Aligner& aligner, const LossWeights& w);

/// Independently deactivates each of the four condition slots with
/// probability p; dropped slots lose flag and payload.
ConditionSet condition_dropout(const ConditionSet& c, double p, Rng& rng);

/// Six fully-connected layers with SiLU mapping (z_t, t) to a velocity of
/// the same width. The final layer starts at zero.
class EmbeddingFlowNet {
 public:
  EmbeddingFlowNet(std::size_t width, std::uint64_t seed, std::size_t hidden = 128,
                   std::size_t time_features = 16);
  /// z [B, width], one t per row.
  Tensor forward(const Tensor& z, const std::vector<double>& t) const;
  std::size_t width() const { return width_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  static constexpr std::size_t kLayers = 6;

 private:
  std::size_t width_, time_features_;
  ParameterSet params_;
  std::vector<Tensor> w_, b_;
};

/// MSE(v(z_t, t), z1 - z0) on the linear path between paired embeddings.
Tensor embedding_flow_loss(const EmbeddingFlowNet& net, const Tensor& z0, const Tensor& z1,
                           const std::vector<double>& t);
/// Same with t drawn uniformly per row from `rng`.
Tensor embedding_flow_loss(const EmbeddingFlowNet& net, const Tensor& z0, const Tensor& z1, Rng& rng);

}  // namespace mupad
