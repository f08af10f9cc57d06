#include "mupad/imaging.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace mupad {

namespace {

struct Dims {
  std::size_t B, C, H, W;
};

Dims image_dims(const Tensor& t, const char* who) {
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  throw ShapeError(std::string(who) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(t.shape()));
}

Shape with_batch(const Tensor& like, std::size_t B, std::size_t C, std::size_t H, std::size_t W) {
  return like.rank() == 4 ? Shape{B, C, H, W} : Shape{C, H, W};
}

}  // namespace

Tensor latent_encode(const Tensor& images, std::size_t f) {
  const Dims d = image_dims(images, "latent_encode");
  if (f == 0 || d.H % f != 0 || d.W % f != 0) {
    throw ShapeError("latent_encode: " + std::to_string(d.H) + "x" + std::to_string(d.W) +
                     " not divisible by factor " + std::to_string(f));
  }
  const std::size_t h = d.H / f, w = d.W / f, C = d.C * f * f;
  Tensor out(with_batch(images, d.B, C, h, w));
  auto o = out.mutable_data();
  auto x = images.data();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t c = 0; c < d.C; ++c)
      for (std::size_t i = 0; i < d.H; ++i)
        for (std::size_t j = 0; j < d.W; ++j) {
          const std::size_t oc = c * f * f + (i % f) * f + j % f;
          o[((b * C + oc) * h + i / f) * w + j / f] = x[((b * d.C + c) * d.H + i) * d.W + j];
        }
  return out;
}

Tensor latent_decode(const Tensor& latents, std::size_t f) {
  const Dims d = image_dims(latents, "latent_decode");
  if (f == 0 || d.C % (f * f) != 0) throw ShapeError("latent_decode: channels not divisible by factor^2");
  const std::size_t C = d.C / (f * f), H = d.H * f, W = d.W * f;
  Tensor out(with_batch(latents, d.B, C, H, W));
  auto o = out.mutable_data();
  auto z = latents.data();
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const std::size_t zc = c * f * f + (i % f) * f + j % f;
          o[((b * C + c) * H + i) * W + j] = z[((b * d.C + zc) * d.H + i / f) * d.W + j / f];
        }
  return out;
}

Tensor to_model_space(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 2.0 * x[i] - 1.0;
  return out;
}

Tensor from_model_space(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(0.5 * (x[i] + 1.0), 0.0, 1.0);
  return out;
}

StainMatrix StainMatrix::ruifrok() {
  StainMatrix m;
  m.rgb_from_hed = {{{0.65, 0.70, 0.29}, {0.07, 0.99, 0.11}, {0.27, 0.57, 0.78}}};
  Eigen::Matrix3d a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = m.rgb_from_hed[r][c];
  const Eigen::Matrix3d inv = a.inverse();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.hed_from_rgb[r][c] = inv(r, c);
  return m;
}

// Row-vector convention: stains = od . hed_from_rgb, od = stains . rgb_from_hed.
Tensor rgb_to_hed(const Tensor& rgb, const StainMatrix& m) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("rgb_to_hed expects [3,H,W]");
  const std::size_t P = rgb.dim(1) * rgb.dim(2);
  Tensor out(rgb.shape());
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < P; ++p) {
    double od[3];
    for (std::size_t c = 0; c < 3; ++c) od[c] = -std::log(std::max(rgb[c * P + p], 1e-6));
    for (std::size_t s = 0; s < 3; ++s) {
      o[s * P + p] = od[0] * m.hed_from_rgb[0][s] + od[1] * m.hed_from_rgb[1][s] + od[2] * m.hed_from_rgb[2][s];
    }
  }
  return out;
}

Tensor hed_to_rgb(const Tensor& hed, const StainMatrix& m) {
  if (hed.rank() != 3 || hed.dim(0) != 3) throw ShapeError("hed_to_rgb expects [3,H,W]");
  const std::size_t P = hed.dim(1) * hed.dim(2);
  Tensor out(hed.shape());
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < P; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double od = hed[p] * m.rgb_from_hed[0][c] + hed[P + p] * m.rgb_from_hed[1][c] +
                        hed[2 * P + p] * m.rgb_from_hed[2][c];
      o[c * P + p] = std::clamp(std::exp(-od), 0.0, 1.0);
    }
  }
  return out;
}

Tensor hed_augment(const Tensor& rgb, const HedPerturbation& pert, const StainMatrix& m) {
  Tensor hed = rgb_to_hed(rgb, m);
  const std::size_t P = rgb.dim(1) * rgb.dim(2);
  auto h = hed.mutable_data();
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t p = 0; p < P; ++p) h[s * P + p] = h[s * P + p] * pert.scale[s] + pert.shift[s];
  return hed_to_rgb(hed, m);
}

std::array<std::size_t, 3> group_members(std::size_t g, std::size_t K) {
  if (K == 0) throw ShapeError("group_members: no channels");
  if (g >= (K + 2) / 3) throw ShapeError("group index " + std::to_string(g) + " out of range");
  std::array<std::size_t, 3> idx{};
  for (std::size_t s = 0; s < 3; ++s) idx[s] = std::min(3 * g + s, K - 1);
  return idx;
}

std::vector<Tensor> group_channels(const Tensor& channels) {
  if (channels.rank() != 3 || channels.dim(0) == 0) throw ShapeError("group_channels expects [K,H,W] with K >= 1");
  const std::size_t K = channels.dim(0), P = channels.dim(1) * channels.dim(2);
  std::vector<Tensor> groups;
  for (std::size_t g = 0; g < (K + 2) / 3; ++g) {
    Tensor t({3, channels.dim(1), channels.dim(2)});
    auto o = t.mutable_data();
    const auto idx = group_members(g, K);
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t p = 0; p < P; ++p) o[s * P + p] = channels[idx[s] * P + p];
    groups.push_back(t);
  }
  return groups;
}

Tensor ungroup_channels(const std::vector<Tensor>& groups, std::size_t K) {
  if (groups.size() != (K + 2) / 3 || groups.empty()) throw ShapeError("ungroup_channels: wrong group count");
  const std::size_t H = groups[0].dim(1), W = groups[0].dim(2), P = H * W;
  Tensor out({K, H, W});
  auto o = out.mutable_data();
  for (std::size_t k = 0; k < K; ++k) {
    const Tensor& g = groups[k / 3];
    if (g.shape() != Shape{3, H, W}) throw ShapeError("ungroup_channels: group shape mismatch");
    for (std::size_t p = 0; p < P; ++p) o[k * P + p] = g[(k % 3) * P + p];
  }
  return out;
}

}  // namespace mupad
