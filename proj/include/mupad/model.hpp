#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "mupad/condition.hpp"
#include "mupad/params.hpp"
#include "mupad/tensor.hpp"

namespace mupad {

enum class CrossAttentionVariant { dca, shared };

struct ModelConfig {
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t patch = 2;
  std::size_t latent_channels = 48;
  std::size_t latent_height = 8;
  std::size_t latent_width = 8;
  /// Extra structural latent channels concatenated with z_t (0 = off).
  std::size_t struct_channels = 0;

  std::size_t image_width = 32;
  std::size_t text_width = 32;
  std::size_t rna_width = kPathwayCount;
  std::size_t cls_width = 32;
  std::size_t vocab_size = 32;
  std::size_t max_text_len = 16;

  std::size_t mlp_ratio = 4;
  std::size_t time_frequencies = 64;
  CrossAttentionVariant variant = CrossAttentionVariant::dca;
  /// Adds a projection of z_cls to the CLS token at the input.
  bool cls_injection = true;
  /// adaLN-zero: modulation and output heads start at zero.
  bool zero_init = true;

  void validate() const;
  std::size_t grid_height() const { return latent_height / patch; }
  std::size_t grid_width() const { return latent_width / patch; }
  std::size_t patch_tokens() const { return grid_height() * grid_width(); }
  /// Patch tokens plus the CLS token.
  std::size_t sequence_length() const { return patch_tokens() + 1; }
  std::size_t patch_in_dim() const { return (latent_channels + struct_channels) * patch * patch; }
  std::size_t patch_out_dim() const { return latent_channels * patch * patch; }
  std::size_t modality_width(std::size_t m) const;
  std::size_t shared_width() const;
};

/// [B,C,H,W] (or [C,H,W]) -> [B*N, C*p*p]; token (i,j) holds patch (i,j)
/// with features ordered (c, dy, dx).
Tensor patchify(const Tensor& z, std::size_t patch);
/// Inverse of patchify for a batch of `batch` latents of C x H x W.
Tensor unpatchify(const Tensor& tokens, std::size_t batch, std::size_t channels, std::size_t height,
                  std::size_t width, std::size_t patch);

/// Sinusoidal features of 1000*t: [cos(f_i * 1000t) ..., sin(f_i * 1000t) ...].
Tensor timestep_features(const std::vector<double>& t, std::size_t frequencies);

/// Condition tokens for one attention modality, packed over the batch.
/// Rows of inactive samples are zero and masked out.
struct ModalityTokens {
  Tensor tokens;  // [B*length, width]
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;  // [B*length]
  std::vector<bool> sample_active;  // [B]

  bool any_active() const;
};

struct ConditionTokens {
  std::size_t batch = 0;
  std::array<ModalityTokens, kAttentionModalities> modality;
  Tensor z_cls;  // [B, cls width], zero rows where inactive
  std::vector<bool> cls_active;
};

struct CrossAttentionWeights {
  Tensor wq;  // [dim, dim]
  std::array<Tensor, kAttentionModalities> wk, wv;  // dca: [width_m, dim]
  Tensor shared_wk, shared_wv;  // shared: [shared width, dim]
  Tensor type_embedding;        // shared: [3, shared width]
};

/// Sum over active modalities of Attention(h Wq, c_m Wk_m, c_m Wv_m).
/// `h` is [B*queries, dim].
Tensor dca_forward(const Tensor& h, const ConditionTokens& c, const CrossAttentionWeights& w, std::size_t heads,
                   std::size_t queries);

/// One attention call over the per-sample concatenation of zero-padded
/// condition tokens plus their type embeddings, in `order`.
Tensor shared_attention_forward(const Tensor& h, const ConditionTokens& c, const CrossAttentionWeights& w,
                                std::size_t heads, std::size_t queries,
                                const std::array<std::size_t, kAttentionModalities>& order = {0, 1, 2});

/// Recorded self-attention maps keyed by (solver step, unconditional pass).
/// Each entry holds one [B,H,S,S] map per layer.
struct BlockActivations {
  std::map<std::pair<std::size_t, bool>, std::vector<Tensor>> maps;

  const std::vector<Tensor>& at(std::size_t step, bool unconditional) const;
  /// Checks every row of every map sums to 1 (or is all zero) within `tol`.
  void validate(double tol = 1e-9) const;
};

struct ForwardOptions {
  bool keep_features = false;
  bool capture_attention = false;
  /// Per-layer probability maps replacing self-attention softmax.
  const std::vector<Tensor>* inject = nullptr;
  /// [B, struct_channels, H, W] when the config has structural channels.
  Tensor z_struct;
};

struct DenoiserOutput {
  Tensor v_patch;                // same shape as z_t
  Tensor v_cls;                  // [B, cls width]
  std::vector<Tensor> features;  // per layer, patch tokens [B*N, dim]
  std::vector<Tensor> attention;  // per layer, [B,H,S,S]
};

struct BlockModulation {
  // shift, scale, gate for self-attention, cross-attention, feed-forward.
  std::array<Tensor, 9> chunks;
};

class DiffusionTransformer {
 public:
  DiffusionTransformer(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// z_t: [B,C,H,W]; one t per sample in [0,1]; one ConditionSet per sample.
  DenoiserOutput forward(const Tensor& z_t, const std::vector<double>& t, const ConditionBatch& cond,
                         const ForwardOptions& opts = {}) const;

  /// Patch tokens [B*N, patch_in_dim] -> embedded tokens plus positions.
  Tensor embed_patches(const Tensor& tokens) const;
  /// Timestep embedding c(t) [B, dim] after the two-layer perceptron.
  Tensor timestep_embedding(const std::vector<double>& t) const;
  /// Per-block adaLN modulation vectors, each [B, dim].
  std::vector<BlockModulation> timestep_modulation(const std::vector<double>& t) const;

  /// Embeds text ids and packs every modality for the batch.
  ConditionTokens resolve(const ConditionBatch& cond) const;
  const CrossAttentionWeights& cross_weights(std::size_t layer) const { return blocks_.at(layer).cross; }

 private:
  struct Block {
    Tensor mod_w, mod_b;
    Tensor qkv_w, qkv_b, out_w, out_b;
    CrossAttentionWeights cross;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  ModelConfig cfg_;
  ParameterSet params_;
  Tensor pos_embed_;  // fixed 2-D sinusoidal [N, dim]
  Tensor patch_w_, patch_b_;
  Tensor cls_token_, cls_proj_;
  Tensor time_w1_, time_b1_, time_w2_, time_b2_;
  Tensor text_embed_, text_pos_;
  std::vector<Block> blocks_;
  Tensor final_mod_w_, final_mod_b_;
  Tensor head_w_, head_b_, skip_w_, skip_b_, cls_head_w_, cls_head_b_;
};

}  // namespace mupad
