#include "mupad/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "mupad/condition.hpp"

namespace mupad::synth {

std::array<double, kFactorCount> Factors::values() const {
  return {density, size, hue, nuisance[0], nuisance[1], nuisance[2], nuisance[3], nuisance[4]};
}

Factors Factors::from_values(const std::array<double, kFactorCount>& v) {
  Factors f{v[0], v[1], v[2], {v[3], v[4], v[5], v[6], v[7]}};
  f.validate();
  return f;
}

void Factors::validate() const {
  for (double x : values()) {
    if (!(x >= 0.0 && x <= 1.0)) throw Error("synthetic factors must lie in [0,1]");
  }
}

std::string domain_name(Domain d) { return d == Domain::clean ? "clean" : "frozen"; }

Domain parse_domain(const std::string& s) {
  if (s == "clean") return Domain::clean;
  if (s == "frozen") return Domain::frozen;
  throw Error("unknown domain '" + s + "'");
}

std::size_t nucleus_count(double density) { return static_cast<std::size_t>(std::lround(3.0 + 12.0 * density)); }
double nucleus_radius(double size) { return 1.0 + 2.0 * size; }

namespace {

enum Stream : std::uint64_t { kFactors = 1, kDomain, kLayout, kArtifacts, kPathwayNoise, kDots };

Rng stream(std::uint64_t seed, std::uint64_t id, Stream s) { return Rng(derive_seed(derive_seed(seed, id), s)); }

constexpr std::size_t N = kImageSize;

struct Disc {
  double y, x;
};

// Sequential placement keeping a 1.5 px gap between rims; when no free spot
// turns up, the farthest candidate is taken and the nucleus may touch others.
std::vector<Disc> place_nuclei(std::size_t count, double r, Rng& rng) {
  std::uniform_real_distribution<double> pos(r, static_cast<double>(N - 1) - r);
  const double min_d = 2.0 * r + 1.5;
  std::vector<Disc> out;
  for (std::size_t k = 0; k < count; ++k) {
    Disc best{pos(rng), pos(rng)};
    double best_gap = -1.0;
    for (int attempt = 0; attempt < 400; ++attempt) {
      const Disc c = attempt == 0 ? best : Disc{pos(rng), pos(rng)};
      double gap = 1e9;
      for (const auto& o : out) gap = std::min(gap, std::hypot(c.y - o.y, c.x - o.x));
      if (gap > best_gap) {
        best = c;
        best_gap = gap;
      }
      if (gap >= min_d) break;
    }
    out.push_back(best);
  }
  return out;
}

std::array<double, 3> lerp(const std::array<double, 3>& a, const std::array<double, 3>& b, double t) {
  return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
}

double lum(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

Factors draw_factors(std::uint64_t seed, std::uint64_t id) {
  Rng rng = stream(seed, id, kFactors);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, kFactorCount> v;
  for (auto& x : v) x = u(rng);
  return Factors::from_values(v);
}

const Tensor& pathway_matrix() {
  static const Tensor m = [] {
    Rng rng(kPathwayMatrixSeed);
    return Tensor::randn({kPathwayCount, kFactorCount}, rng);
  }();
  return m;
}

std::string caption_for(const Factors& f, Domain domain) {
  auto bin = [](double x, const char* lo, const char* mid, const char* hi) {
    return std::string(x < 1.0 / 3.0 ? lo : x < 2.0 / 3.0 ? mid : hi);
  };
  return bin(f.density, "sparse", "moderate", "dense") + " cellularity " + bin(f.size, "small", "medium", "large") +
         " nuclei " + bin(f.hue, "pink", "mauve", "purple") + " stain " + domain_name(domain) + " tissue";
}

Sample render(const Factors& f, Domain domain, std::uint64_t seed, std::uint64_t id) {
  f.validate();
  Sample s;
  s.id = id;
  s.factors = f;
  s.domain = domain;
  s.caption = caption_for(f, domain);

  Rng layout = stream(seed, id, kLayout);
  const double r = nucleus_radius(f.size);
  const auto discs = place_nuclei(nucleus_count(f.density), r, layout);

  std::vector<double> mask(N * N, 0.0);
  for (const auto& d : discs)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const double dy = static_cast<double>(i) - d.y, dx = static_cast<double>(j) - d.x;
        if (dy * dy + dx * dx <= r * r) mask[i * N + j] = 1.0;
      }

  // Background in a pink-purple band; nuclei dark purple.
  auto bg = lerp({0.95, 0.73, 0.86}, {0.80, 0.68, 0.93}, f.hue);
  const double bl = lum(bg);
  for (auto& c : bg) c += 0.25 * f.nuisance[3] * (bl - c);
  std::array<double, 3> nuc{0.32 + 0.04 * (f.hue - 0.5), 0.14, 0.45};
  const double target = 0.14 + 0.08 * f.nuisance[2];
  const double nl = lum(nuc);
  for (auto& c : nuc) c *= target / nl;

  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  s.image = Tensor({3, N, N});
  auto img = s.image.mutable_data();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const bool in = mask[i * N + j] > 0.0;
      const double tilt = 0.08 * (f.nuisance[1] - 0.5) * (2.0 * static_cast<double>(j) / (N - 1) - 1.0);
      const double tex = (in ? 0.03 * f.nuisance[4] : 0.03 * f.nuisance[0]) * jitter(layout);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (in ? nuc[c] : bg[c]) + tilt + tex;
        img[(c * N + i) * N + j] = std::clamp(v, 0.0, 1.0);
      }
    }

  if (domain == Domain::frozen) {
    // Four dark one-pixel vertical streaks and a global brightness offset.
    Rng art = stream(seed, id, kArtifacts);
    std::vector<std::size_t> cols(N);
    for (std::size_t j = 0; j < N; ++j) cols[j] = j;
    std::shuffle(cols.begin(), cols.end(), art);
    const double offset = std::uniform_real_distribution<double>(-0.1, 0.1)(art);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          double& v = img[(c * N + i) * N + j];
          const bool streak = std::find(cols.begin(), cols.begin() + 4, j) != cols.begin() + 4;
          v = std::clamp(v + offset - (streak ? 0.3 : 0.0), 0.0, 1.0);
        }
  }

  s.markers = Tensor({kMarkerChannels, N, N});
  auto mk = s.markers.mutable_data();
  Rng dots = stream(seed, id, kDots);
  std::bernoulli_distribution dot(0.02 * (1.0 + f.density));
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const bool in = mask[i * N + j] > 0.0;
      bool edge = false;
      if (in) {
        edge = i == 0 || j == 0 || i + 1 == N || j + 1 == N || mask[(i - 1) * N + j] == 0.0 ||
               mask[(i + 1) * N + j] == 0.0 || mask[i * N + j - 1] == 0.0 || mask[i * N + j + 1] == 0.0;
      }
      mk[(0 * N + i) * N + j] = in ? 1.0 : 0.0;
      mk[(1 * N + i) * N + j] = edge ? 1.0 : 0.0;
      mk[(2 * N + i) * N + j] = static_cast<double>(i) / static_cast<double>(N - 1);
      mk[(3 * N + i) * N + j] = dot(dots) ? 1.0 : 0.0;
    }

  Rng noise = stream(seed, id, kPathwayNoise);
  std::normal_distribution<double> eta(0.0, 0.1);
  const auto& m = pathway_matrix();
  const auto fv = f.values();
  s.pathway = Tensor({kPathwayCount});
  auto pw = s.pathway.mutable_data();
  for (std::size_t p = 0; p < kPathwayCount; ++p) {
    double acc = 0.0;
    for (std::size_t k = 0; k < kFactorCount; ++k) acc += m[p * kFactorCount + k] * fv[k];
    pw[p] = acc + eta(noise);
  }
  return s;
}

Sample generate(std::uint64_t seed, std::uint64_t id, double frozen_fraction) {
  if (!(frozen_fraction >= 0.0 && frozen_fraction <= 1.0)) throw Error("frozen fraction must lie in [0,1]");
  Rng dom = stream(seed, id, kDomain);
  const Domain d = std::bernoulli_distribution(frozen_fraction)(dom) ? Domain::frozen : Domain::clean;
  return render(draw_factors(seed, id), d, seed, id);
}

Tensor luminance(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("luminance expects [3,H,W], got " + shape_str(image.shape()));
  const std::size_t hw = image.dim(1) * image.dim(2);
  Tensor out({image.dim(1), image.dim(2)});
  auto o = out.mutable_data();
  const auto d = image.data();
  for (std::size_t k = 0; k < hw; ++k) o[k] = 0.299 * d[k] + 0.587 * d[hw + k] + 0.114 * d[2 * hw + k];
  return out;
}

std::size_t dark_components(const Tensor& image, double threshold) {
  const Tensor l = luminance(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<char> seen(h * w, 0);
  std::size_t count = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (seen[start] || !(l[start] < threshold)) continue;
    ++count;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t k = stack.back();
      stack.pop_back();
      const std::size_t i = k / w, j = k % w;
      const std::size_t nb[4] = {i > 0 ? k - w : k, i + 1 < h ? k + w : k, j > 0 ? k - 1 : k, j + 1 < w ? k + 1 : k};
      for (std::size_t n : nb) {
        if (!seen[n] && l[n] < threshold) {
          seen[n] = 1;
          stack.push_back(n);
        }
      }
    }
  }
  return count;
}

double oracle_density(const Tensor& image) {
  const double c = static_cast<double>(dark_components(image));
  return std::clamp((c - 3.0) / 12.0, 0.0, 1.0);
}

}  // namespace mupad::synth
