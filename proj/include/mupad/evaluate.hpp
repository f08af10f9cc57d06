#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "mupad/config.hpp"
#include "mupad/metrics.hpp"
#include "mupad/synthetic.hpp"
#include "mupad/train.hpp"

namespace mupad {

/// Pooled frozen-teacher features, one row per [3,32,32] image.
Eigen::MatrixXd teacher_features(const std::vector<Tensor>& images);
double teacher_fid(const std::vector<Tensor>& a, const std::vector<Tensor>& b);
/// Mean cosine similarity of teacher features between paired images.
double teacher_similarity(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

/// Images of a dataset directory (manifest order) or every *.ppm in a
/// directory, sorted by file name.
std::vector<Tensor> load_images(const std::filesystem::path& dir);
/// Writes <prefix>NNNN.ppm files.
void save_images(const std::filesystem::path& dir, const std::vector<Tensor>& images,
                 const std::string& prefix = "sample_");

/// FID and KID on teacher features, the density-oracle W1 distance and,
/// for equal counts, paired teacher similarity. Each with a bootstrap
/// interval over `iterations` resamples.
std::vector<metrics::MetricReport> evaluate_images(const std::vector<Tensor>& real, const std::vector<Tensor>& fake,
                                                   std::size_t iterations = 25, std::uint64_t seed = 0);
/// name, value, ci_low, ci_high, iterations, seed.
std::string report_tsv(const std::vector<metrics::MetricReport>& rows);

/// Line plot of the total (black) and patch (red) loss curves, [3,h,w].
Tensor loss_plot(const std::vector<StepLoss>& log, std::size_t width = 320, std::size_t height = 160);

struct AblationCell {
  CrossAttentionVariant variant = CrossAttentionVariant::dca;
  AlignArm arm = AlignArm::mupad;
  std::uint64_t seed = 0;
  double fid = 0.0;
  double similarity = 0.0;
  double final_loss = 0.0;  // mean patch loss over the last min(100, steps) steps
};

/// Shared inputs of every ablation cell: identical data, steps and sampler.
struct AblationSetup {
  RunConfig base;
  const TrainingSet* train = nullptr;
  std::vector<Tensor> references;  // image conditions and FID reference set
  std::size_t sample_steps = 25;
};

/// Trains one (variant, arm, seed) cell from scratch and scores its EMA model
/// on image-conditioned generation against the references.
AblationCell run_ablation_cell(const AblationSetup& setup, CrossAttentionVariant variant, AlignArm arm,
                               std::uint64_t seed, const std::filesystem::path& run_dir = {});

/// variant, arm, seed, fid, similarity, final_loss.
std::string ablation_tsv(const std::vector<AblationCell>& cells);
/// One row per (variant, arm): mean and per-seed FID and similarity.
std::string ablation_summary(const std::vector<AblationCell>& cells);

}  // namespace mupad
