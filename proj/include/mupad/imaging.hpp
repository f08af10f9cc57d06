#pragma once

#include <array>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad {

inline constexpr std::size_t kLatentFactor = 4;

/// Lossless space-to-depth: [C,H,W] -> [C*f*f, H/f, W/f] (also batched).
/// Pixel (i,j) of channel c lands in channel c*f*f + (i mod f)*f + (j mod f)
/// at (i/f, j/f).
Tensor latent_encode(const Tensor& images, std::size_t factor = kLatentFactor);
/// Exact inverse of latent_encode.
Tensor latent_decode(const Tensor& latents, std::size_t factor = kLatentFactor);

/// Maps [0,1] pixels to model space [-1,1] and back (decode clamps).
Tensor to_model_space(const Tensor& x);
Tensor from_model_space(const Tensor& x);

/// Ruifrok-Johnston H/E/DAB optical-density basis (rows are stain vectors).
struct StainMatrix {
  std::array<std::array<double, 3>, 3> rgb_from_hed;
  std::array<std::array<double, 3>, 3> hed_from_rgb;

  static StainMatrix ruifrok();
};

struct HedPerturbation {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> shift{0.0, 0.0, 0.0};
};

/// RGB [3,H,W] -> per-pixel stain concentrations [3,H,W] (H, E, DAB).
Tensor rgb_to_hed(const Tensor& rgb, const StainMatrix& m = StainMatrix::ruifrok());
Tensor hed_to_rgb(const Tensor& hed, const StainMatrix& m = StainMatrix::ruifrok());
/// Optical density, per-stain scale/shift, reconstruction, clamp to [0,1].
Tensor hed_augment(const Tensor& rgb, const HedPerturbation& p, const StainMatrix& m = StainMatrix::ruifrok());

/// [K,H,W] -> ceil(K/3) groups of [3,H,W]; the last group repeats its final
/// channel to fill three.
std::vector<Tensor> group_channels(const Tensor& channels);
/// Inverse of group_channels for the original channel count.
Tensor ungroup_channels(const std::vector<Tensor>& groups, std::size_t channels);
/// Source channel index of each slot in group `g`.
std::array<std::size_t, 3> group_members(std::size_t g, std::size_t channels);

}  // namespace mupad
