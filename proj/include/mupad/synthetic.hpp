#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "mupad/tensor.hpp"

namespace mupad::synth {

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kMarkerChannels = 4;
inline constexpr std::size_t kFactorCount = 8;
inline constexpr std::uint64_t kPathwayMatrixSeed = 0x9a7e0331;

/// Ground-truth generative factors, all in [0,1].
struct Factors {
  double density = 0.5;
  double size = 0.5;
  double hue = 0.5;
  // texture noise, illumination tilt, nucleus darkness, desaturation, nucleus texture
  std::array<double, 5> nuisance{0.5, 0.5, 0.5, 0.5, 0.5};

  std::array<double, kFactorCount> values() const;
  static Factors from_values(const std::array<double, kFactorCount>& v);
  void validate() const;
};

enum class Domain { clean, frozen };
std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

struct Sample {
  std::uint64_t id = 0;
  Factors factors;
  Domain domain = Domain::clean;
  std::string caption;
  Tensor image;    // [3,32,32] in [0,1]
  Tensor markers;  // [4,32,32]: nucleus mask, boundary, vertical gradient, dots
  Tensor pathway;  // [331]
};

std::size_t nucleus_count(double density);
double nucleus_radius(double size);

Factors draw_factors(std::uint64_t seed, std::uint64_t id);
/// Deterministic in (factors, domain, seed, id).
Sample render(const Factors& f, Domain domain, std::uint64_t seed, std::uint64_t id);
/// Factors and domain drawn from the (seed, id) stream.
Sample generate(std::uint64_t seed, std::uint64_t id, double frozen_fraction = 0.5);

/// Binned factor words, e.g. "dense cellularity large nuclei purple stain clean tissue".
std::string caption_for(const Factors& f, Domain domain);
/// Fixed seeded 331x8 map from factors to pathway activity.
const Tensor& pathway_matrix();

/// 0.299 R + 0.587 G + 0.114 B, [H,W].
Tensor luminance(const Tensor& image);
/// 4-connected components of pixels with luminance below `threshold`.
std::size_t dark_components(const Tensor& image, double threshold = 0.35);
/// clamp((components - 3) / 12, 0, 1).
double oracle_density(const Tensor& image);

}  // namespace mupad::synth
