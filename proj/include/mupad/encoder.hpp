#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad {

/// [C,H,W] or [B,C,H,W] -> channels-last rows [B*H*W, C].
Tensor to_channels_last(const Tensor& images);

struct EncoderOutput {
  Tensor tokens;  // [grid cells, width], row-major over the grid
  Tensor cls;     // [width], spatial mean of the tokens
};

/// Frozen random convolution stack: 3x3 stride-2 convs with tanh. Weights
/// are a pure function of the seed and never receive gradients.
class StubEncoder {
 public:
  StubEncoder(std::uint64_t seed, std::vector<std::size_t> widths = {16, 32, 32}, std::size_t in_channels = 3);

  /// Feature grid for one image [C,H,W] in [0,1].
  EncoderOutput encode(const Tensor& image) const;
  /// Grids for a batch [B,C,H,W]: [B*cells, width].
  Tensor encode_grid(const Tensor& images) const;

  std::size_t stride() const { return std::size_t{1} << widths_.size(); }
  std::size_t width() const { return widths_.back(); }
  std::size_t in_channels() const { return in_channels_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Tensor>& weights() const { return weights_; }
  /// SHA-256 of the serialised weights.
  std::string weight_digest() const;

 private:
  std::uint64_t seed_;
  std::vector<std::size_t> widths_;
  std::size_t in_channels_;
  std::vector<Tensor> weights_;  // kernel, bias per layer
};

inline constexpr std::uint64_t kConditionEncoderSeed = 0x5eed0001;
inline constexpr std::uint64_t kTeacherEncoderSeed = 0x5eed0002;

/// Image-condition encoder (tokens + pooled CLS).
StubEncoder make_condition_encoder();
/// Alignment teacher: same topology, independent weights.
StubEncoder make_teacher_encoder();

}  // namespace mupad
