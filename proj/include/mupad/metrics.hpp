#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad::metrics {

/// Row-major copy of a rank-2 tensor.
Eigen::MatrixXd to_matrix(const Tensor& rows);

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t n = 0;

  /// Mean and unbiased covariance of feature rows; needs at least two rows.
  static GaussianStats from_rows(const Eigen::MatrixXd& feats);
  /// Symmetric to 1e-10 and no eigenvalue below -1e-8.
  void validate() const;
};

double frechet_distance(const GaussianStats& a, const GaussianStats& b);
double frechet_distance(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b);

/// Unbiased squared MMD with kernel (x.y/d + 1)^3. Equal-size sets use the
/// paired U-statistic so a set compared with itself scores exactly 0.
double kid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

double cosine_similarity_mean(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

/// A value that may be undefined, with the reason when it is.
struct Scalar {
  std::optional<double> value;
  std::string reason;

  bool defined() const { return value.has_value(); }
  double operator*() const;
  static Scalar undefined(std::string why) { return {std::nullopt, std::move(why)}; }
};

Scalar pearson(const std::vector<double>& x, const std::vector<double>& y);
/// Per channel: mean over patches of the pixel-wise correlation. Patches
/// whose correlation is undefined are skipped; images are [N, C, H, W].
std::vector<Scalar> patch_pcc(const Tensor& pred, const Tensor& truth);
/// Correlation between predicted and true patch-mean intensities of one
/// channel, computed within each slide and averaged over slides.
Scalar slide_pcc(const Tensor& pred, const Tensor& truth, const std::vector<std::size_t>& slide_index,
                 std::size_t channel);

double wasserstein1(std::vector<double> a, std::vector<double> b);
/// Mann-Whitney AUC, ties count one half.
double auc(const std::vector<double>& pos, const std::vector<double>& neg);

struct MetricReport {
  std::string name;
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
};

/// Linear-interpolated empirical quantile, q in [0,1].
double quantile(std::vector<double> v, double q);

/// Inverse of the empirical CDF: smallest value with at least a fraction q
/// of the sample at or below it.
double empirical_percentile(std::vector<double> v, double q);

using IndexMetric = std::function<double(const std::vector<std::size_t>&)>;
/// Resamples n indices with replacement; 2.5/97.5 empirical percentile
/// interval. The point value uses the full index set.
MetricReport bootstrap(const std::string& name, std::size_t n, const IndexMetric& fn, std::size_t iterations = 25,
                       std::uint64_t seed = 0);
using PairIndexMetric = std::function<double(const std::vector<std::size_t>&, const std::vector<std::size_t>&)>;
/// Two independent samples resampled separately.
MetricReport bootstrap(const std::string& name, std::size_t n_a, std::size_t n_b, const PairIndexMetric& fn,
                       std::size_t iterations = 25, std::uint64_t seed = 0);

/// Two-sided sign-flip test on paired differences.
double paired_permutation_test(const std::vector<double>& a, const std::vector<double>& b,
                               std::size_t permutations, std::uint64_t seed);
/// Two-sided label-shuffle test on the difference of means.
double permutation_test(const std::vector<double>& a, const std::vector<double>& b, std::size_t permutations,
                        std::uint64_t seed);

}  // namespace mupad::metrics
