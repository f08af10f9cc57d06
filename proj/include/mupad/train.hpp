#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mupad/checkpoint.hpp"
#include "mupad/conditioner.hpp"
#include "mupad/config.hpp"
#include "mupad/model.hpp"
#include "mupad/objectives.hpp"
#include "mupad/synthetic.hpp"

namespace mupad {

/// Everything the training loop reads, precomputed once from the samples.
struct TrainingSet {
  Tensor x0;          // [N, C, H, W] target latents in model space
  Tensor z_struct;    // [N, S, H, W] structural latents (stain task only)
  Tensor teacher;     // [N, cells, width] frozen teacher grids of the target image
  Tensor cls_target;  // [N, cls width] condition-encoder CLS of the target image
  ConditionBatch conditions;

  std::size_t size() const { return conditions.size(); }
  /// Generate task: target is the H&E image, conditioned on image, text, RNA
  /// and z_cls. Stain task: target is marker group `cfg.stain_group`,
  /// z_struct is the H&E latent and the H&E tokens and CLS are the conditions.
  static TrainingSet build(const std::vector<synth::Sample>& samples, const RunConfig& cfg,
                           const Conditioner& conditioner = Conditioner());
};

/// Target image of a sample for the configured task, [3,32,32].
Tensor target_image(const synth::Sample& s, const RunConfig& cfg);

struct StepLoss {
  std::uint64_t step = 0;  // 1-based
  double total = 0.0, patch = 0.0, cls = 0.0, align = 0.0;
};

/// Tab-separated loss log, one flushed line per step.
class LossLog {
 public:
  static constexpr const char* kHeader = "step\ttotal\tpatch\tcls\talign";
  /// Appends to an existing log or starts a new one with the header.
  explicit LossLog(const std::filesystem::path& path);
  void write(const StepLoss& s);
  static std::vector<StepLoss> read(const std::filesystem::path& path);

 private:
  std::ofstream out_;
};

struct TrainingAborted : NumericError {
  TrainingAborted(const std::string& what, std::uint64_t step, std::filesystem::path ckpt)
      : NumericError(what), failed_step(step), last_good(std::move(ckpt)) {}
  std::uint64_t failed_step;
  std::filesystem::path last_good;
};

/// Single-threaded AdamW loop. The batch, timesteps, noise and condition
/// dropout of step k depend only on (seed, k), so a resumed run continues
/// exactly where a straight run would be.
///
/// EMA decay warms up as min(ema_decay, (1+k)/(10+k)) after step k.
class Trainer {
 public:
  Trainer(RunConfig cfg, const TrainingSet& data);
  Trainer(const Checkpoint& ckpt, const TrainingSet& data);

  StepLoss step();
  std::uint64_t steps_done() const { return step_; }
  const RunConfig& config() const { return cfg_; }
  const DiffusionTransformer& model() const { return model_; }
  const Aligner& aligner() const { return aligner_; }
  /// A fresh model holding the EMA weights.
  DiffusionTransformer ema_model() const;
  Checkpoint checkpoint() const;

 private:
  void init_state();

  RunConfig cfg_;
  const TrainingSet* data_;
  DiffusionTransformer model_;
  Aligner aligner_;
  std::vector<Tensor> trainable_;
  AdamWState opt_;
  EmaState ema_;
  std::uint64_t step_ = 0;
};

/// Model with the checkpoint's EMA (default) or raw weights.
DiffusionTransformer load_model(const Checkpoint& ckpt, bool use_ema = true);

/// Runs until `trainer.steps_done() == until`, writing into `dir`:
/// loss.tsv (appended), config.ini, step_NNNNNN.ckpt every checkpoint_every
/// steps, and final.ckpt. A non-finite step saves last_good.ckpt and throws
/// TrainingAborted.
std::vector<StepLoss> train_run(Trainer& trainer, const std::filesystem::path& dir, std::uint64_t until);

}  // namespace mupad
