#include "mupad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mupad::metrics {

Eigen::MatrixXd to_matrix(const Tensor& rows) {
  if (rows.rank() != 2) throw ShapeError("feature tensor must be rank 2, got " + shape_str(rows.shape()));
  Eigen::MatrixXd m(rows.dim(0), rows.dim(1));
  const auto d = rows.data();
  for (std::size_t i = 0; i < rows.dim(0); ++i)
    for (std::size_t j = 0; j < rows.dim(1); ++j) m(i, j) = d[i * rows.dim(1) + j];
  return m;
}

GaussianStats GaussianStats::from_rows(const Eigen::MatrixXd& feats) {
  if (feats.rows() < 2) throw Error("covariance needs at least two feature rows");
  GaussianStats s;
  s.n = static_cast<std::size_t>(feats.rows());
  s.mean = feats.colwise().mean().transpose();
  const Eigen::MatrixXd c = feats.rowwise() - s.mean.transpose();
  s.cov = (c.transpose() * c) / static_cast<double>(feats.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
  return s;
}

void GaussianStats::validate() const {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) throw ShapeError("covariance does not match mean");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw NumericError("covariance is not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8) throw NumericError("covariance is not positive semidefinite");
}

namespace {

// Eigen-decomposition with clipping of tiny negative eigenvalues.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
  if (es.eigenvalues().minCoeff() < -1e-8) throw NumericError(std::string(what) + " is not positive semidefinite");
  return es;
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size()) throw ShapeError("frechet_distance: feature dims differ");
  a.validate();
  b.validate();
  const double mean_term = (a.mean - b.mean).squaredNorm();
  // Equal covariances cancel analytically.
  if (a.cov == b.cov) return mean_term;
  const auto ea = psd_eigen(a.cov, "covariance");
  const Eigen::VectorXd root = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd s1 = ea.eigenvectors() * root.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = s1 * b.cov * s1;
  m = 0.5 * (m + m.transpose()).eval();
  const auto em = psd_eigen(m, "covariance product");
  const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt);
}

double frechet_distance(const Eigen::MatrixXd& feats_a, const Eigen::MatrixXd& feats_b) {
  return frechet_distance(GaussianStats::from_rows(feats_a), GaussianStats::from_rows(feats_b));
}

double kid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw Error("kid needs at least two samples per side");
  if (a.cols() != b.cols()) throw ShapeError("kid: feature dims differ");
  const double d = static_cast<double>(a.cols());
  auto kernel = [d](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    return ((x * y.transpose()).array() / d + 1.0).cube().matrix().eval();
  };
  const Eigen::MatrixXd kaa = kernel(a, a), kbb = kernel(b, b), kab = kernel(a, b);
  const double m = static_cast<double>(a.rows()), n = static_cast<double>(b.rows());
  const double saa = kaa.sum() - kaa.trace(), sbb = kbb.sum() - kbb.trace();
  if (a.rows() == b.rows()) {
    const double sab = kab.sum() - kab.trace();
    return (saa + sbb - 2.0 * sab) / (m * (m - 1.0));
  }
  return saa / (m * (m - 1.0)) + sbb / (n * (n - 1.0)) - 2.0 * kab.sum() / (m * n);
}

double cosine_similarity_mean(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("cosine similarity needs paired rows");
  if (a.rows() == 0) throw Error("cosine similarity of an empty set");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double na = a.row(i).norm(), nb = b.row(i).norm();
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine similarity: zero-norm row " + std::to_string(i));
    acc += a.row(i).dot(b.row(i)) / (na * nb);
  }
  return acc / static_cast<double>(a.rows());
}

double Scalar::operator*() const {
  if (!value) throw NumericError("undefined value: " + reason);
  return *value;
}

Scalar pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("pearson: lengths differ");
  if (x.size() < 2) return Scalar::undefined("fewer than two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 1e-24 * std::max(1.0, mx * mx) * n) return Scalar::undefined("first input is constant");
  if (syy <= 1e-24 * std::max(1.0, my * my) * n) return Scalar::undefined("second input is constant");
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), {}};
}

namespace {

void check_images(const Tensor& pred, const Tensor& truth) {
  if (pred.rank() != 4 || pred.shape() != truth.shape()) {
    throw ShapeError("expected matching [N,C,H,W] images, got " + shape_str(pred.shape()) + " and " +
                     shape_str(truth.shape()));
  }
}

std::vector<double> plane(const Tensor& img, std::size_t n, std::size_t c) {
  const std::size_t hw = img.dim(2) * img.dim(3);
  const auto d = img.data();
  const std::size_t off = (n * img.dim(1) + c) * hw;
  return {d.begin() + static_cast<std::ptrdiff_t>(off), d.begin() + static_cast<std::ptrdiff_t>(off + hw)};
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

std::vector<Scalar> patch_pcc(const Tensor& pred, const Tensor& truth) {
  check_images(pred, truth);
  std::vector<Scalar> out;
  for (std::size_t c = 0; c < pred.dim(1); ++c) {
    double acc = 0.0;
    std::size_t used = 0;
    for (std::size_t n = 0; n < pred.dim(0); ++n) {
      const Scalar r = pearson(plane(pred, n, c), plane(truth, n, c));
      if (r.defined()) {
        acc += *r;
        ++used;
      }
    }
    if (used == 0) {
      out.push_back(Scalar::undefined("every patch of channel " + std::to_string(c) + " is constant"));
    } else {
      out.push_back({acc / static_cast<double>(used), {}});
    }
  }
  return out;
}

Scalar slide_pcc(const Tensor& pred, const Tensor& truth, const std::vector<std::size_t>& slide_index,
                 std::size_t channel) {
  check_images(pred, truth);
  if (slide_index.size() != pred.dim(0)) throw ShapeError("slide_pcc: one slide index per patch required");
  if (channel >= pred.dim(1)) throw ShapeError("slide_pcc: channel out of range");
  std::vector<std::size_t> slides(slide_index);
  std::sort(slides.begin(), slides.end());
  slides.erase(std::unique(slides.begin(), slides.end()), slides.end());
  double acc = 0.0;
  std::size_t used = 0;
  std::string last_reason = "no slides";
  for (std::size_t s : slides) {
    std::vector<double> p, t;
    for (std::size_t n = 0; n < pred.dim(0); ++n) {
      if (slide_index[n] != s) continue;
      p.push_back(mean_of(plane(pred, n, channel)));
      t.push_back(mean_of(plane(truth, n, channel)));
    }
    const Scalar r = pearson(p, t);
    if (r.defined()) {
      acc += *r;
      ++used;
    } else {
      last_reason = "slide " + std::to_string(s) + ": " + r.reason;
    }
  }
  if (used == 0) return Scalar::undefined(last_reason);
  return {acc / static_cast<double>(used), {}};
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw Error("wasserstein1 needs nonempty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
  }
  // Integrate |Qa(u) - Qb(u)| over the merged quantile breakpoints.
  const double m = static_cast<double>(a.size()), n = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, acc = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / m, next_b = static_cast<double>(j + 1) / n;
    const double next = std::min(next_a, next_b);
    acc += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return acc;
}

double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw Error("auc needs nonempty positive and negative scores");
  std::vector<std::pair<double, int>> all;
  for (double s : pos) all.push_back({s, 1});
  for (double s : neg) all.push_back({s, 0});
  std::sort(all.begin(), all.end());
  // Wins counted in half-units so the statistic stays an exact integer.
  long long twice_u = 0;
  std::size_t negs_below = 0;
  for (std::size_t k = 0; k < all.size();) {
    std::size_t end = k, p = 0, q = 0;
    while (end < all.size() && all[end].first == all[k].first) {
      (all[end].second ? p : q) += 1;
      ++end;
    }
    twice_u += static_cast<long long>(p) * (2 * static_cast<long long>(negs_below) + static_cast<long long>(q));
    negs_below += q;
    k = end;
  }
  const long long twice_n = 2LL * static_cast<long long>(pos.size() * neg.size());
  // The smaller side is rounded once and the other is its exact complement,
  // so swapping the classes sums to one exactly.
  if (2 * twice_u <= twice_n) return static_cast<double>(twice_u) / static_cast<double>(twice_n);
  return 1.0 - static_cast<double>(twice_n - twice_u) / static_cast<double>(twice_n);
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double empirical_percentile(std::vector<double> v, double q) {
  if (v.empty()) throw Error("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(q * static_cast<double>(v.size()));
  const std::size_t k = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(v.size())));
  return v[k - 1];
}

namespace {

std::vector<std::size_t> resample(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

MetricReport summarize(const std::string& name, double point, const std::vector<double>& reps, std::uint64_t seed) {
  MetricReport r{name, point, 0.0, 0.0, reps.size(), seed};
  if (reps.size() == 1) {
    r.ci_low = r.ci_high = reps[0];
    return r;
  }
  // The percentile interval can miss the full-data value when the resample
  // count is small; widen it to keep the point inside.
  r.ci_low = std::min(empirical_percentile(reps, 0.025), point);
  r.ci_high = std::max(empirical_percentile(reps, 0.975), point);
  return r;
}

}  // namespace

MetricReport bootstrap(const std::string& name, std::size_t n, const IndexMetric& fn, std::size_t iterations,
                       std::uint64_t seed) {
  if (iterations < 1) throw Error("bootstrap needs at least one iteration");
  if (n == 0) throw Error("bootstrap of an empty sample");
  Rng rng(derive_seed(seed, 0xb007));
  std::vector<double> reps;
  for (std::size_t it = 0; it < iterations; ++it) reps.push_back(fn(resample(n, rng)));
  return summarize(name, fn(identity(n)), reps, seed);
}

MetricReport bootstrap(const std::string& name, std::size_t n_a, std::size_t n_b, const PairIndexMetric& fn,
                       std::size_t iterations, std::uint64_t seed) {
  if (iterations < 1) throw Error("bootstrap needs at least one iteration");
  if (n_a == 0 || n_b == 0) throw Error("bootstrap of an empty sample");
  Rng rng(derive_seed(seed, 0xb007));
  std::vector<double> reps;
  for (std::size_t it = 0; it < iterations; ++it) {
    auto ia = resample(n_a, rng);
    auto ib = resample(n_b, rng);
    reps.push_back(fn(ia, ib));
  }
  return summarize(name, fn(identity(n_a), identity(n_b)), reps, seed);
}

double paired_permutation_test(const std::vector<double>& a, const std::vector<double>& b,
                               std::size_t permutations, std::uint64_t seed) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("paired test needs equal nonempty samples");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double observed = std::abs(std::accumulate(d.begin(), d.end(), 0.0));
  Rng rng(derive_seed(seed, 0x9e7));
  std::bernoulli_distribution flip(0.5);
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    double s = 0.0;
    for (double x : d) s += flip(rng) ? -x : x;
    if (std::abs(s) >= observed - 1e-12 * (1.0 + observed)) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
}

double permutation_test(const std::vector<double>& a, const std::vector<double>& b, std::size_t permutations,
                        std::uint64_t seed) {
  if (a.empty() || b.empty()) throw Error("permutation test needs nonempty samples");
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  auto stat = [&](const std::vector<double>& v) {
    const double ma = std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0) / a.size();
    const double mb = std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(a.size()), v.end(), 0.0) / b.size();
    return std::abs(ma - mb);
  };
  const double observed = stat(pooled);
  Rng rng(derive_seed(seed, 0x9e8));
  std::size_t extreme = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(pooled.begin(), pooled.end(), rng);
    if (stat(pooled) >= observed - 1e-12 * (1.0 + observed)) ++extreme;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
}

}  // namespace mupad::metrics
