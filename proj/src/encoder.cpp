#include "mupad/encoder.hpp"

#include <cmath>

#include "mupad/io.hpp"
#include "mupad/ops.hpp"

namespace mupad {

Tensor to_channels_last(const Tensor& images) {
  std::size_t B = 1, C, H, W;
  if (images.rank() == 4) {
    B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  } else if (images.rank() == 3) {
    C = images.dim(0), H = images.dim(1), W = images.dim(2);
  } else {
    throw ShapeError("expected [C,H,W] or [B,C,H,W] images, got " + shape_str(images.shape()));
  }
  Tensor out({B * H * W, C});
  auto o = out.mutable_data();
  auto d = images.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) o[(b * H * W + p) * C + c] = d[(b * C + c) * H * W + p];
  return out;
}

StubEncoder::StubEncoder(std::uint64_t seed, std::vector<std::size_t> widths, std::size_t in_channels)
    : seed_(seed), widths_(std::move(widths)), in_channels_(in_channels) {
  if (widths_.empty()) throw Error("encoder needs at least one layer");
  Rng rng(derive_seed(seed, 0xe4c0de));
  std::size_t c = in_channels_;
  for (std::size_t w : widths_) {
    const double std = 1.5 / std::sqrt(static_cast<double>(9 * c));
    weights_.push_back(Tensor::randn({9 * c, w}, rng, std));
    weights_.push_back(Tensor::randn({w}, rng, 0.1));
    c = w;
  }
}

Tensor StubEncoder::encode_grid(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != in_channels_) {
    throw ShapeError("encoder expects [B," + std::to_string(in_channels_) + ",H,W] images, got " +
                     shape_str(images.shape()));
  }
  const std::size_t B = images.dim(0);
  std::size_t H = images.dim(2), W = images.dim(3), C = in_channels_;
  if (H % stride() != 0 || W % stride() != 0) throw ShapeError("image size must be divisible by encoder stride");
  Tensor x = to_channels_last(images);
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    ops::ConvGeometry g{B, H, W, C, 3, 2, 1};
    Tensor y = ops::conv2d(x, weights_[2 * l], weights_[2 * l + 1], g);
    for (auto& v : y.mutable_data()) v = std::tanh(v);
    x = y;
    H = g.out_height(), W = g.out_width(), C = widths_[l];
  }
  return x;
}

EncoderOutput StubEncoder::encode(const Tensor& image) const {
  if (image.rank() != 3) throw ShapeError("encode expects a single [C,H,W] image");
  Tensor grid = encode_grid(image.view({1, image.dim(0), image.dim(1), image.dim(2)}));
  const std::size_t cells = grid.dim(0), w = grid.dim(1);
  Tensor cls({w}, 0.0);
  auto c = cls.mutable_data();
  for (std::size_t r = 0; r < cells; ++r)
    for (std::size_t j = 0; j < w; ++j) c[j] += grid[r * w + j] / static_cast<double>(cells);
  return {grid, cls};
}

std::string StubEncoder::weight_digest() const { return io::tensor_digest(weights_); }

StubEncoder make_condition_encoder() { return StubEncoder(kConditionEncoderSeed); }
StubEncoder make_teacher_encoder() { return StubEncoder(kTeacherEncoderSeed); }

}  // namespace mupad
