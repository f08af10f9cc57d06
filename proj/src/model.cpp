#include "mupad/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mupad/ops.hpp"

namespace mupad {

namespace {

using ops::add;
using ops::linear;
using ops::matmul;

/// LN(x) * (1 + scale) + shift, with modulation rows already expanded.
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  return add(ops::mul(ops::layer_norm(x), ops::add_scalar(scale, 1.0)), shift);
}

Tensor sincos_2d(std::size_t gh, std::size_t gw, std::size_t dim) {
  Tensor out({gh * gw, dim});
  auto o = out.mutable_data();
  const std::size_t quarter = dim / 4;
  for (std::size_t i = 0; i < gh; ++i) {
    for (std::size_t j = 0; j < gw; ++j) {
      const std::size_t row = (i * gw + j) * dim;
      for (std::size_t f = 0; f < quarter; ++f) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(f) / static_cast<double>(quarter));
        o[row + f] = std::sin(static_cast<double>(i) * omega);
        o[row + quarter + f] = std::cos(static_cast<double>(i) * omega);
        o[row + 2 * quarter + f] = std::sin(static_cast<double>(j) * omega);
        o[row + 3 * quarter + f] = std::cos(static_cast<double>(j) * omega);
      }
    }
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (depth == 0 || dim == 0 || heads == 0 || patch == 0) throw Error("model config: zero-sized dimension");
  if (dim % heads != 0) throw Error("model config: dim must be divisible by heads");
  if (dim % 4 != 0) throw Error("model config: dim must be divisible by 4");
  if (latent_height % patch != 0 || latent_width % patch != 0) {
    throw Error("model config: latent height/width must be divisible by patch");
  }
  if (time_frequencies < 2 || time_frequencies % 2 != 0) throw Error("model config: time_frequencies must be even");
}

std::size_t ModelConfig::modality_width(std::size_t m) const {
  switch (m) {
    case 0: return image_width;
    case 1: return text_width;
    case 2: return rna_width;
  }
  throw Error("bad modality index");
}

std::size_t ModelConfig::shared_width() const { return std::max({image_width, text_width, rna_width}); }

Tensor patchify(const Tensor& z, std::size_t patch) {
  std::size_t B = 1, C, H, W;
  if (z.rank() == 4) {
    B = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
  } else if (z.rank() == 3) {
    C = z.dim(0), H = z.dim(1), W = z.dim(2);
  } else {
    throw ShapeError("patchify expects [C,H,W] or [B,C,H,W], got " + shape_str(z.shape()));
  }
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ShapeError("patchify: " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, feat = C * patch * patch;
  std::vector<std::size_t> perm(z.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < gh; ++i)
      for (std::size_t j = 0; j < gw; ++j)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < patch; ++dy)
            for (std::size_t dx = 0; dx < patch; ++dx)
              perm[o++] = ((b * C + c) * H + i * patch + dy) * W + j * patch + dx;
  return ops::permute(z, perm, {B * gh * gw, feat});
}

Tensor unpatchify(const Tensor& tokens, std::size_t batch, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) throw ShapeError("unpatchify: indivisible dims");
  const std::size_t gh = height / patch, gw = width / patch, feat = channels * patch * patch;
  if (tokens.rank() != 2 || tokens.dim(0) != batch * gh * gw || tokens.dim(1) != feat) {
    throw ShapeError("unpatchify: token shape " + shape_str(tokens.shape()) + " does not match latent");
  }
  std::vector<std::size_t> perm(tokens.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const std::size_t token = b * gh * gw + (y / patch) * gw + x / patch;
          const std::size_t f = c * patch * patch + (y % patch) * patch + x % patch;
          perm[o++] = token * feat + f;
        }
  return ops::permute(tokens, perm, {batch, channels, height, width});
}

Tensor timestep_features(const std::vector<double>& t, std::size_t frequencies) {
  const std::size_t half = frequencies / 2;
  Tensor out({t.size(), frequencies});
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = 1000.0 * t[b] * f;
      o[b * frequencies + i] = std::cos(arg);
      o[b * frequencies + half + i] = std::sin(arg);
    }
  }
  return out;
}

bool ModalityTokens::any_active() const {
  return std::any_of(sample_active.begin(), sample_active.end(), [](bool a) { return a; });
}

Tensor dca_forward(const Tensor& h, const ConditionTokens& c, const CrossAttentionWeights& w, std::size_t heads,
                   std::size_t queries) {
  Tensor out;
  Tensor q;
  for (std::size_t m = 0; m < kAttentionModalities; ++m) {
    const ModalityTokens& mt = c.modality[m];
    if (!mt.any_active()) continue;
    if (!w.wk[m].defined() || !w.wv[m].defined()) {
      throw Error("no key/value weights for modality " + std::string(modality_name(static_cast<Modality>(m))));
    }
    if (!q.defined()) q = matmul(h, w.wq);
    Tensor k = matmul(mt.tokens, w.wk[m]);
    Tensor v = matmul(mt.tokens, w.wv[m]);
    Tensor a = ops::attention(q, k, v, {c.batch, queries, mt.length, heads}, mt.mask);
    out = out.defined() ? add(out, a) : a;
  }
  if (!out.defined()) return Tensor({h.dim(0), w.wq.dim(1)}, 0.0);
  return out;
}

Tensor shared_attention_forward(const Tensor& h, const ConditionTokens& c, const CrossAttentionWeights& w,
                                std::size_t heads, std::size_t queries,
                                const std::array<std::size_t, kAttentionModalities>& order) {
  if (!w.shared_wk.defined() || !w.shared_wv.defined() || !w.type_embedding.defined()) {
    throw Error("shared cross-attention weights missing");
  }
  const std::size_t sw = w.shared_wk.dim(0);
  const std::size_t B = c.batch;
  std::vector<Tensor> parts;
  std::vector<std::size_t> lengths;
  std::vector<const ModalityTokens*> used;
  for (std::size_t m : order) {
    const ModalityTokens& mt = c.modality.at(m);
    if (!mt.any_active()) continue;
    Tensor tok = mt.tokens;
    const std::size_t width = tok.dim(1);
    if (width > sw) throw ShapeError("condition width exceeds shared width");
    if (width < sw) tok = ops::concat_cols({tok, Tensor({tok.dim(0), sw - width}, 0.0)});
    tok = ops::add_rowvec(tok, ops::gather_rows(w.type_embedding, {m}));
    parts.push_back(tok);
    lengths.push_back(mt.length);
    used.push_back(&mt);
  }
  if (parts.empty()) return Tensor({h.dim(0), w.wq.dim(1)}, 0.0);

  std::size_t keys = 0;
  for (std::size_t L : lengths) keys += L;
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> mask;
  rows.reserve(B * keys);
  mask.reserve(B * keys);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t offset = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
      for (std::size_t s = 0; s < lengths[j]; ++s) {
        rows.push_back(offset + b * lengths[j] + s);
        mask.push_back(used[j]->mask[b * lengths[j] + s]);
      }
      offset += B * lengths[j];
    }
  }
  Tensor cat = ops::gather_rows(ops::concat_rows(parts), rows);
  Tensor q = matmul(h, w.wq);
  Tensor k = matmul(cat, w.shared_wk);
  Tensor v = matmul(cat, w.shared_wv);
  return ops::attention(q, k, v, {B, queries, keys, heads}, mask);
}

const std::vector<Tensor>& BlockActivations::at(std::size_t step, bool unconditional) const {
  auto it = maps.find({step, unconditional});
  if (it == maps.end()) {
    throw Error("no recorded attention for step " + std::to_string(step) + (unconditional ? " (uncond)" : ""));
  }
  return it->second;
}

void BlockActivations::validate(double tol) const {
  for (const auto& [key, layers] : maps) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Tensor& p = layers[l];
      if (p.rank() != 4) throw ShapeError("attention map must be rank 4");
      const std::size_t S = p.dim(3);
      auto d = p.data();
      for (std::size_t r = 0; r < p.numel() / S; ++r) {
        double s = 0.0;
        bool zero = true;
        for (std::size_t k = 0; k < S; ++k) {
          const double x = d[r * S + k];
          if (!(x >= 0.0)) throw NumericError("attention map has a negative or non-finite entry");
          zero = zero && x == 0.0;
          s += x;
        }
        if (!zero && std::abs(s - 1.0) > tol) {
          throw NumericError("attention map row does not sum to 1 at step " + std::to_string(key.first) +
                             ", layer " + std::to_string(l));
        }
      }
    }
  }
}

DiffusionTransformer::DiffusionTransformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  const std::size_t D = cfg_.dim;
  auto xavier = [&](std::size_t in, std::size_t out) { return init::xavier_uniform(in, out, rng); };
  auto maybe_zero = [&](std::size_t in, std::size_t out) {
    return cfg_.zero_init ? init::zeros({in, out}) : init::xavier_uniform(in, out, rng);
  };

  pos_embed_ = sincos_2d(cfg_.grid_height(), cfg_.grid_width(), D);
  patch_w_ = params_.add("patch.w", xavier(cfg_.patch_in_dim(), D));
  patch_b_ = params_.add("patch.b", init::zeros({D}));
  cls_token_ = params_.add("cls.token", init::normal({1, D}, 0.02, rng));
  cls_proj_ = params_.add("cls.proj", xavier(cfg_.cls_width, D));
  time_w1_ = params_.add("time.w1", init::normal({cfg_.time_frequencies, D}, 0.02, rng));
  time_b1_ = params_.add("time.b1", init::zeros({D}));
  time_w2_ = params_.add("time.w2", init::normal({D, D}, 0.02, rng));
  time_b2_ = params_.add("time.b2", init::zeros({D}));
  text_embed_ = params_.add("text.embed", init::normal({cfg_.vocab_size, cfg_.text_width}, 1.0, rng));
  text_pos_ = params_.add("text.pos", init::normal({cfg_.max_text_len, cfg_.text_width}, 0.1, rng));

  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b;
    b.mod_w = params_.add(p + "mod.w", maybe_zero(D, 9 * D));
    b.mod_b = params_.add(p + "mod.b", init::zeros({9 * D}));
    b.qkv_w = params_.add(p + "attn.qkv.w", xavier(D, 3 * D));
    b.qkv_b = params_.add(p + "attn.qkv.b", init::zeros({3 * D}));
    b.out_w = params_.add(p + "attn.out.w", xavier(D, D));
    b.out_b = params_.add(p + "attn.out.b", init::zeros({D}));
    b.cross.wq = params_.add(p + "cross.wq", xavier(D, D));
    if (cfg_.variant == CrossAttentionVariant::dca) {
      for (std::size_t m = 0; m < kAttentionModalities; ++m) {
        const std::string name(modality_name(static_cast<Modality>(m)));
        b.cross.wk[m] = params_.add(p + "cross.wk." + name, xavier(cfg_.modality_width(m), D));
        b.cross.wv[m] = params_.add(p + "cross.wv." + name, xavier(cfg_.modality_width(m), D));
      }
    } else {
      const std::size_t sw = cfg_.shared_width();
      b.cross.shared_wk = params_.add(p + "cross.shared.wk", xavier(sw, D));
      b.cross.shared_wv = params_.add(p + "cross.shared.wv", xavier(sw, D));
      b.cross.type_embedding = params_.add(p + "cross.type", init::normal({kAttentionModalities, sw}, 0.02, rng));
    }
    b.mlp_w1 = params_.add(p + "mlp.w1", xavier(D, cfg_.mlp_ratio * D));
    b.mlp_b1 = params_.add(p + "mlp.b1", init::zeros({cfg_.mlp_ratio * D}));
    b.mlp_w2 = params_.add(p + "mlp.w2", xavier(cfg_.mlp_ratio * D, D));
    b.mlp_b2 = params_.add(p + "mlp.b2", init::zeros({D}));
    blocks_.push_back(std::move(b));
  }
  final_mod_w_ = params_.add("final.mod.w", maybe_zero(D, 2 * D));
  final_mod_b_ = params_.add("final.mod.b", init::zeros({2 * D}));
  head_w_ = params_.add("head.w", maybe_zero(D, cfg_.patch_out_dim()));
  head_b_ = params_.add("head.b", init::zeros({cfg_.patch_out_dim()}));
  skip_w_ = params_.add("head.skip.w", maybe_zero(D, cfg_.patch_out_dim()));
  skip_b_ = params_.add("head.skip.b", init::zeros({cfg_.patch_out_dim()}));
  cls_head_w_ = params_.add("cls_head.w", maybe_zero(D, cfg_.cls_width));
  cls_head_b_ = params_.add("cls_head.b", init::zeros({cfg_.cls_width}));
}

Tensor DiffusionTransformer::timestep_embedding(const std::vector<double>& t) const {
  for (double x : t) {
    if (!(x >= 0.0 && x <= 1.0)) throw Error("timestep must lie in [0,1], got " + std::to_string(x));
  }
  Tensor f = timestep_features(t, cfg_.time_frequencies);
  return linear(ops::silu(linear(f, time_w1_, time_b1_)), time_w2_, time_b2_);
}

std::vector<BlockModulation> DiffusionTransformer::timestep_modulation(const std::vector<double>& t) const {
  Tensor c = ops::silu(timestep_embedding(t));
  std::vector<BlockModulation> out;
  for (const Block& b : blocks_) {
    Tensor mod = linear(c, b.mod_w, b.mod_b);
    BlockModulation bm;
    for (std::size_t j = 0; j < 9; ++j) bm.chunks[j] = ops::slice_cols(mod, j * cfg_.dim, cfg_.dim);
    out.push_back(std::move(bm));
  }
  return out;
}

ConditionTokens DiffusionTransformer::resolve(const ConditionBatch& cond) const {
  const std::size_t B = cond.size();
  ConditionTokens ct;
  ct.batch = B;
  for (const auto& cs : cond) cs.validate();

  // Image: constant tokens, zero-padded to the longest sequence.
  {
    ModalityTokens& mt = ct.modality[0];
    mt.sample_active.assign(B, false);
    for (std::size_t b = 0; b < B; ++b) {
      if (!cond[b].is_active(Modality::image)) continue;
      const Tensor& tok = cond[b].image_tokens;
      if (tok.dim(1) != cfg_.image_width) {
        throw ShapeError("image tokens have width " + std::to_string(tok.dim(1)) + ", expected " +
                         std::to_string(cfg_.image_width));
      }
      mt.sample_active[b] = true;
      mt.length = std::max(mt.length, tok.dim(0));
    }
    if (mt.length > 0) {
      const std::size_t L = mt.length, W = cfg_.image_width;
      mt.tokens = Tensor({B * L, W}, 0.0);
      mt.mask.assign(B * L, 0);
      auto o = mt.tokens.mutable_data();
      for (std::size_t b = 0; b < B; ++b) {
        if (!mt.sample_active[b]) continue;
        auto src = cond[b].image_tokens.data();
        std::copy(src.begin(), src.end(), o.begin() + static_cast<std::ptrdiff_t>(b * L * W));
        std::fill_n(mt.mask.begin() + static_cast<std::ptrdiff_t>(b * L), cond[b].image_tokens.dim(0), 1);
      }
    }
  }

  // Text: learned embeddings plus positions; padding rows scaled to zero.
  {
    ModalityTokens& mt = ct.modality[1];
    mt.sample_active.assign(B, false);
    for (std::size_t b = 0; b < B; ++b) {
      if (!cond[b].is_active(Modality::text)) continue;
      const auto& ids = cond[b].text_ids;
      if (ids.size() > cfg_.max_text_len) {
        throw ShapeError("caption has " + std::to_string(ids.size()) + " tokens, max is " +
                         std::to_string(cfg_.max_text_len));
      }
      for (std::size_t id : ids) {
        if (id >= cfg_.vocab_size) throw Error("text token id out of vocabulary: " + std::to_string(id));
      }
      mt.sample_active[b] = true;
      mt.length = std::max(mt.length, ids.size());
    }
    if (mt.length > 0) {
      const std::size_t L = mt.length;
      std::vector<std::size_t> ids(B * L, 0), pos(B * L, 0);
      std::vector<double> keep(B * L, 0.0);
      mt.mask.assign(B * L, 0);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t s = 0; s < L; ++s) pos[b * L + s] = s;
        if (!mt.sample_active[b]) continue;
        const auto& src = cond[b].text_ids;
        for (std::size_t s = 0; s < src.size(); ++s) {
          ids[b * L + s] = src[s];
          keep[b * L + s] = 1.0;
          mt.mask[b * L + s] = 1;
        }
      }
      mt.tokens =
          ops::scale_rows(add(ops::gather_rows(text_embed_, ids), ops::gather_rows(text_pos_, pos)), keep);
    }
  }

  // RNA: one token per sample.
  {
    ModalityTokens& mt = ct.modality[2];
    mt.sample_active.assign(B, false);
    for (std::size_t b = 0; b < B; ++b) mt.sample_active[b] = cond[b].is_active(Modality::rna);
    if (mt.any_active()) {
      mt.length = 1;
      mt.tokens = Tensor({B, cfg_.rna_width}, 0.0);
      mt.mask.assign(B, 0);
      auto o = mt.tokens.mutable_data();
      for (std::size_t b = 0; b < B; ++b) {
        if (!mt.sample_active[b]) continue;
        auto src = cond[b].rna.data();
        if (src.size() != cfg_.rna_width) throw ShapeError("rna condition width mismatch");
        std::copy(src.begin(), src.end(), o.begin() + static_cast<std::ptrdiff_t>(b * cfg_.rna_width));
        mt.mask[b] = 1;
      }
    }
  }

  ct.cls_active.assign(B, false);
  ct.z_cls = Tensor({B, cfg_.cls_width}, 0.0);
  auto zc = ct.z_cls.mutable_data();
  for (std::size_t b = 0; b < B; ++b) {
    if (!cond[b].is_active(Modality::cls)) continue;
    auto src = cond[b].z_cls.data();
    if (src.size() != cfg_.cls_width) throw ShapeError("z_cls width mismatch");
    std::copy(src.begin(), src.end(), zc.begin() + static_cast<std::ptrdiff_t>(b * cfg_.cls_width));
    ct.cls_active[b] = true;
  }
  return ct;
}

Tensor DiffusionTransformer::embed_patches(const Tensor& tokens) const {
  const std::size_t N = cfg_.patch_tokens();
  if (tokens.rank() != 2 || tokens.dim(0) % N != 0) throw ShapeError("embed_patches: bad token shape");
  std::vector<std::size_t> pos_rows(tokens.dim(0));
  for (std::size_t i = 0; i < pos_rows.size(); ++i) pos_rows[i] = i % N;
  return add(linear(tokens, patch_w_, patch_b_), ops::gather_rows(pos_embed_, pos_rows));
}

DenoiserOutput DiffusionTransformer::forward(const Tensor& z_t, const std::vector<double>& t,
                                             const ConditionBatch& cond, const ForwardOptions& opts) const {
  if (z_t.rank() != 4 || z_t.dim(1) != cfg_.latent_channels || z_t.dim(2) != cfg_.latent_height ||
      z_t.dim(3) != cfg_.latent_width) {
    throw ShapeError("forward: latent shape " + shape_str(z_t.shape()) + " does not match config");
  }
  const std::size_t B = z_t.dim(0);
  if (t.size() != B) throw ShapeError("forward: one timestep per sample required");
  if (cond.size() != B) throw ShapeError("forward: one condition set per sample required");
  if (opts.inject && opts.inject->size() != cfg_.depth) {
    throw ShapeError("injected attention has " + std::to_string(opts.inject->size()) + " layers, model has " +
                     std::to_string(cfg_.depth));
  }

  const std::size_t N = cfg_.patch_tokens(), S = cfg_.sequence_length(), D = cfg_.dim;

  Tensor x_tok = patchify(z_t, cfg_.patch);
  if (cfg_.struct_channels > 0) {
    const Tensor& zs = opts.z_struct;
    if (!zs.defined() || zs.rank() != 4 || zs.dim(0) != B || zs.dim(1) != cfg_.struct_channels ||
        zs.dim(2) != cfg_.latent_height || zs.dim(3) != cfg_.latent_width) {
      throw ShapeError("forward: structural latent missing or mis-shaped");
    }
    x_tok = ops::concat_cols({x_tok, patchify(zs, cfg_.patch)});
  }

  Tensor h = embed_patches(x_tok);

  const ConditionTokens ct = resolve(cond);
  Tensor cls = ops::repeat_rows(cls_token_, B);
  const bool any_cls = std::any_of(ct.cls_active.begin(), ct.cls_active.end(), [](bool a) { return a; });
  if (cfg_.cls_injection && any_cls) cls = add(cls, matmul(ct.z_cls, cls_proj_));

  // Sequence rows are sample-major: [cls, patch_0 .. patch_{N-1}] per sample.
  std::vector<std::size_t> seq_rows(B * S), patch_rows(B * N), cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) {
    seq_rows[b * S] = b;
    cls_rows[b] = b * S;
    for (std::size_t n = 0; n < N; ++n) {
      seq_rows[b * S + 1 + n] = B + b * N + n;
      patch_rows[b * N + n] = b * S + 1 + n;
    }
  }
  Tensor x = ops::gather_rows(ops::concat_rows({cls, h}), seq_rows);

  const std::vector<BlockModulation> mods = timestep_modulation(t);
  DenoiserOutput out;
  for (std::size_t l = 0; l < cfg_.depth; ++l) {
    const Block& blk = blocks_[l];
    std::array<Tensor, 9> m;
    for (std::size_t j = 0; j < 9; ++j) m[j] = ops::repeat_rows(mods[l].chunks[j], S);

    Tensor h1 = modulate(x, m[0], m[1]);
    Tensor qkv = linear(h1, blk.qkv_w, blk.qkv_b);
    const Tensor* override_probs = nullptr;
    if (opts.inject && (*opts.inject)[l].defined()) override_probs = &(*opts.inject)[l];
    Tensor probs;
    Tensor a = ops::attention(ops::slice_cols(qkv, 0, D), ops::slice_cols(qkv, D, D), ops::slice_cols(qkv, 2 * D, D),
                              {B, S, S, cfg_.heads}, {}, override_probs,
                              opts.capture_attention ? &probs : nullptr);
    x = add(x, ops::mul(m[2], linear(a, blk.out_w, blk.out_b)));

    Tensor h2 = modulate(x, m[3], m[4]);
    Tensor d = cfg_.variant == CrossAttentionVariant::dca ? dca_forward(h2, ct, blk.cross, cfg_.heads, S)
                                                          : shared_attention_forward(h2, ct, blk.cross, cfg_.heads, S);
    x = add(x, ops::mul(m[5], d));

    Tensor h3 = modulate(x, m[6], m[7]);
    Tensor f = linear(ops::gelu(linear(h3, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2);
    x = add(x, ops::mul(m[8], f));

    if (opts.keep_features) out.features.push_back(ops::gather_rows(x, patch_rows));
    if (opts.capture_attention) out.attention.push_back(probs);
  }

  const Tensor temb = ops::silu(timestep_embedding(t));
  Tensor fm = linear(temb, final_mod_w_, final_mod_b_);
  Tensor hf = modulate(x, ops::repeat_rows(ops::slice_cols(fm, 0, D), S),
                       ops::repeat_rows(ops::slice_cols(fm, D, D), S));
  Tensor patch_out = linear(ops::gather_rows(hf, patch_rows), head_w_, head_b_);
  // The head reads a D-wide state but writes patch_out_dim values, so on its
  // own it can only move z_t inside a fixed D-dimensional subspace. A
  // time-gated elementwise skip from z_t reaches the remaining directions.
  const Tensor gain = ops::repeat_rows(linear(temb, skip_w_, skip_b_), N);
  patch_out = add(patch_out, ops::mul(gain, ops::slice_cols(x_tok, 0, cfg_.patch_out_dim())));
  out.v_patch = unpatchify(patch_out, B, cfg_.latent_channels, cfg_.latent_height, cfg_.latent_width, cfg_.patch);
  out.v_cls = linear(ops::gather_rows(hf, cls_rows), cls_head_w_, cls_head_b_);
  return out;
}

}  // namespace mupad
