#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "mupad/flow.hpp"
#include "mupad/model.hpp"
#include "mupad/objectives.hpp"

namespace mupad {

/// What the denoiser learns to generate.
enum class Task {
  generate,  // H&E-like image from image/text/RNA conditions
  stain,     // one marker channel group, structurally conditioned on the H&E latent
};
std::string task_name(Task t);
Task parse_task(const std::string& s);

std::string variant_name(CrossAttentionVariant v);
CrossAttentionVariant parse_variant(const std::string& s);

struct RunConfig {
  ModelConfig model;
  LossWeights weights;
  AlignArm arm = AlignArm::mupad;
  /// Block whose output feeds the alignment projector; unset means the middle block.
  std::size_t align_layer = static_cast<std::size_t>(-1);

  Task task = Task::generate;
  std::size_t stain_group = 0;

  std::size_t steps = 3000;
  std::size_t batch = 32;
  double lr = 1e-4;
  double weight_decay = 0.0;
  /// Ceiling of the warmed-up EMA decay; see Trainer.
  double ema_decay = 0.9999;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  /// 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 0;

  std::size_t sample_steps = 50;
  flow::SamplerMode sample_mode = flow::SamplerMode::ode;
  double noise_scale = 1.0;
  double guidance_start = 2.5;
  double guidance_end = 0.0;

  std::size_t resolved_align_layer() const;
  flow::SamplerConfig sampler(std::uint64_t seed) const;
  flow::GuidanceSchedule guidance() const;
  void validate() const;

  /// INI text with [model], [loss], [train] and [sample] sections.
  std::string to_ini() const;
  static RunConfig from_ini(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Replaces `seed` with MUPAD_SEED when that variable is set. Returns true
/// if an override was applied.
bool apply_seed_override(RunConfig& cfg);

}  // namespace mupad
