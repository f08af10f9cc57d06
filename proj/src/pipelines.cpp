#include "mupad/pipelines.hpp"

#include <algorithm>
#include <cmath>

#include "mupad/imaging.hpp"
#include "mupad/ops.hpp"
#include "mupad/synthetic.hpp"

namespace mupad {

namespace {

bool unconditional(const ConditionBatch& cond) {
  return std::all_of(cond.begin(), cond.end(), [](const ConditionSet& c) { return c.active_count() == 0; });
}

Tensor match_batch(const Tensor& z_struct, std::size_t batch) {
  if (!z_struct.defined() || z_struct.dim(0) == batch) return z_struct;
  if (z_struct.dim(0) != 1) throw ShapeError("structural latent batch does not match the solver state");
  std::vector<Tensor> parts(batch, unstack(z_struct, 0));
  return stack(parts);
}

}  // namespace

flow::VelocityFn velocity_field(const DiffusionTransformer& model, Tensor z_struct, BlockActivations* record,
                                const BlockActivations* inject, std::vector<std::size_t> inject_layers) {
  for (std::size_t l : inject_layers) {
    if (l >= model.config().depth) {
      throw ShapeError("inject layer " + std::to_string(l) + " outside a " + std::to_string(model.config().depth) +
                       "-block model");
    }
  }
  return [&model, z_struct = std::move(z_struct), record, inject, layers = std::move(inject_layers)](
             const Tensor& z, double t, const ConditionBatch& cond, std::size_t step) {
    ForwardOptions opts;
    opts.z_struct = match_batch(z_struct, z.dim(0));
    opts.capture_attention = record != nullptr;
    const bool uncond = unconditional(cond);
    std::vector<Tensor> maps;
    if (inject && !layers.empty()) {
      const auto& recorded = inject->at(step, uncond);
      maps.resize(model.config().depth);
      for (std::size_t l : layers) maps[l] = recorded.at(l);
      opts.inject = &maps;
    }
    auto out = model.forward(z, std::vector<double>(z.dim(0), t), cond, opts);
    if (record) record->maps[{step, uncond}] = std::move(out.attention);
    return out.v_patch;
  };
}

Tensor initial_noise(const ModelConfig& mc, std::size_t batch, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x2a01));
  return Tensor::randn({batch, mc.latent_channels, mc.latent_height, mc.latent_width}, rng);
}

Tensor encode_image(const Tensor& image) { return to_model_space(latent_encode(image)); }

Tensor decode_latent(const Tensor& latent) { return from_model_space(latent_decode(latent)); }

std::vector<Tensor> sample_images(const DiffusionTransformer& model, const ConditionBatch& cond,
                                  const flow::SamplerConfig& sampler, const flow::GuidanceSchedule& guidance,
                                  const Tensor& z_struct) {
  if (cond.empty()) return {};
  const Tensor z_T = initial_noise(model.config(), cond.size(), sampler.seed);
  const Tensor z0 = flow::sample(velocity_field(model, z_struct), z_T, cond, sampler, guidance);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < cond.size(); ++i) out.push_back(decode_latent(unstack(z0, i)));
  return out;
}

std::vector<std::size_t> default_inject_layers(std::size_t depth) {
  std::vector<std::size_t> out;
  for (std::size_t l = depth / 2; l < depth; ++l) out.push_back(l);
  return out;
}

TranslationResult translate(const DiffusionTransformer& model, const Conditioner& conditioner,
                            const TranslationRequest& req) {
  if (req.source.shape() != Shape{3, synth::kImageSize, synth::kImageSize}) {
    throw ShapeError("translation source must be 3x32x32, got " + shape_str(req.source.shape()));
  }
  const ConditionBatch src{conditioner.from_text(req.source_prompt)};
  const ConditionBatch tgt{conditioner.from_text(req.target_prompt)};
  const Tensor z0 = encode_image(req.source);
  const Tensor z = z0.view({1, z0.dim(0), z0.dim(1), z0.dim(2)});

  TranslationResult res;
  res.z_T = flow::ddim_invert(velocity_field(model), z, src, req.steps);
  const flow::SamplerConfig solver{req.steps, flow::SamplerMode::ode, 0.0, 0};
  BlockActivations source_maps;
  const Tensor recon = flow::sample_ode(velocity_field(model, {}, &source_maps), res.z_T, src, solver, req.guidance);
  const Tensor out = flow::sample_ode(velocity_field(model, {}, nullptr, &source_maps, req.inject_layers), res.z_T,
                                      tgt, solver, req.guidance);
  res.latent = out;
  res.reconstruction_latent = recon;
  res.reconstruction = decode_latent(unstack(recon, 0));
  res.image = decode_latent(unstack(out, 0));
  return res;
}

Tensor stain(const DiffusionTransformer& model, const Conditioner& conditioner, const StainRequest& req,
             const flow::SamplerConfig& sampler, const flow::GuidanceSchedule& guidance) {
  const auto& mc = model.config();
  if (mc.struct_channels == 0) throw Error("staining needs a model with structural channels");
  if (req.structure.shape() != Shape{3, synth::kImageSize, synth::kImageSize}) {
    throw ShapeError("structure image must be 3x32x32, got " + shape_str(req.structure.shape()));
  }
  const std::size_t groups = (synth::kMarkerChannels + 2) / 3;
  if (req.group >= groups) {
    throw ShapeError("group " + std::to_string(req.group) + " out of range (" + std::to_string(groups) + " groups)");
  }
  const Tensor zs = encode_image(req.structure);
  if (zs.dim(0) != mc.struct_channels) throw ShapeError("structural latent channels do not match the model");
  const ConditionSet cond = req.has_semantic ? req.semantic : conditioner.from_image(req.structure);
  const auto images = sample_images(model, {cond}, sampler, guidance, zs.view({1, zs.dim(0), zs.dim(1), zs.dim(2)}));
  return images.front();
}

Tensor stain_all(const std::vector<const DiffusionTransformer*>& group_models, const Conditioner& conditioner,
                 const Tensor& structure, std::size_t channels, const flow::SamplerConfig& sampler,
                 const flow::GuidanceSchedule& guidance) {
  const std::size_t groups = (channels + 2) / 3;
  if (group_models.size() != groups) {
    throw ShapeError(std::to_string(channels) + " channels need " + std::to_string(groups) + " group models, got " +
                     std::to_string(group_models.size()));
  }
  std::vector<Tensor> parts;
  for (std::size_t g = 0; g < groups; ++g) {
    StainRequest req;
    req.structure = structure;
    req.group = g;
    flow::SamplerConfig s = sampler;
    s.seed = derive_seed(sampler.seed, g);
    parts.push_back(stain(*group_models[g], conditioner, req, s, guidance));
  }
  return ungroup_channels(parts, channels);
}

Tensor embed_translate(const EmbeddingFlowNet& net, const Tensor& z_source, std::size_t steps) {
  if (steps == 0) throw Error("embedding translation needs at least one step");
  if (z_source.rank() != 2 || z_source.dim(1) != net.width()) {
    throw ShapeError("embedding batch must be [B," + std::to_string(net.width()) + "], got " +
                     shape_str(z_source.shape()));
  }
  const double dt = 1.0 / static_cast<double>(steps);
  Tensor z = z_source.clone();
  for (std::size_t k = 0; k < steps; ++k) {
    const std::vector<double> t(z.dim(0), static_cast<double>(k) * dt);
    z = ops::add(z, ops::scale(net.forward(z, t), dt));
    for (double v : z.data())
      if (!std::isfinite(v)) throw NumericError("embedding trajectory became non-finite at step " + std::to_string(k));
  }
  return z;
}

}  // namespace mupad
