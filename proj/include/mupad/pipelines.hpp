#pragma once

#include <string>
#include <vector>

#include "mupad/conditioner.hpp"
#include "mupad/flow.hpp"
#include "mupad/model.hpp"
#include "mupad/objectives.hpp"

namespace mupad {

/// Velocity field of a frozen model for the flow solvers. With `record`,
/// self-attention maps of every call are stored under (step, unconditional);
/// with `inject`, maps recorded at the same key replace the softmax of the
/// listed layers. A sample counts as unconditional when it has no active slot.
flow::VelocityFn velocity_field(const DiffusionTransformer& model, Tensor z_struct = {},
                                BlockActivations* record = nullptr, const BlockActivations* inject = nullptr,
                                std::vector<std::size_t> inject_layers = {});

/// Seeded z_T ~ N(0, I) for `batch` latents of the model's shape.
Tensor initial_noise(const ModelConfig& mc, std::size_t batch, std::uint64_t seed);

/// Latents [B,C,H,W] in model space <-> images [3,32,32] in [0,1].
Tensor encode_image(const Tensor& image);
Tensor decode_latent(const Tensor& latent);

/// Conditional generation; one output image per condition set.
std::vector<Tensor> sample_images(const DiffusionTransformer& model, const ConditionBatch& cond,
                                  const flow::SamplerConfig& sampler, const flow::GuidanceSchedule& guidance,
                                  const Tensor& z_struct = {});

struct TranslationRequest {
  Tensor source;  // [3,32,32]
  std::string source_prompt;
  std::string target_prompt;
  std::size_t steps = 50;
  std::vector<std::size_t> inject_layers;
  /// Inversion runs at w = 1, so reconstruction is only faithful at w = 1.
  flow::GuidanceSchedule guidance = flow::GuidanceSchedule::constant(1.0);
};

/// Upper half of the blocks: [depth/2, depth).
std::vector<std::size_t> default_inject_layers(std::size_t depth);

struct TranslationResult {
  Tensor image;           // translated, [3,32,32]
  Tensor reconstruction;  // source-prompt pass from the same z_T
  Tensor z_T;
  Tensor latent, reconstruction_latent;  // [1,C,H,W] before decoding
};

/// Inverts the source under its prompt, replays it under the same prompt
/// while recording attention, then decodes z_T under the target prompt with
/// the recorded maps injected into `inject_layers`.
TranslationResult translate(const DiffusionTransformer& model, const Conditioner& conditioner,
                            const TranslationRequest& req);

struct StainRequest {
  Tensor structure;  // source stain image [3,32,32]
  std::size_t group = 0;
  /// Semantic tokens; defaults to the structure image's tokens and CLS.
  ConditionSet semantic;
  bool has_semantic = false;
};

/// One marker group [3,32,32] in [0,1]. The model must have been trained
/// with structural channels for this group.
Tensor stain(const DiffusionTransformer& model, const Conditioner& conditioner, const StainRequest& req,
             const flow::SamplerConfig& sampler, const flow::GuidanceSchedule& guidance);

/// All groups from per-group models, reassembled to [channels,32,32].
Tensor stain_all(const std::vector<const DiffusionTransformer*>& group_models, const Conditioner& conditioner,
                 const Tensor& structure, std::size_t channels, const flow::SamplerConfig& sampler,
                 const flow::GuidanceSchedule& guidance);

/// Euler integration of the embedding flow from t = 0 to 1; z is [B,width].
Tensor embed_translate(const EmbeddingFlowNet& net, const Tensor& z_source, std::size_t steps = 50);

}  // namespace mupad
