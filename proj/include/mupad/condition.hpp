#pragma once

#include <array>
#include <cstddef>
#include <string_view>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad {

/// Conditioning slots. The first three are the cross-attention modalities;
/// `cls` is the semantic CLS embedding fed to the CLS stream.
enum class Modality : std::size_t { image = 0, text = 1, rna = 2, cls = 3 };
inline constexpr std::size_t kModalityCount = 4;
inline constexpr std::size_t kAttentionModalities = 3;
inline constexpr std::size_t kPathwayCount = 331;

std::string_view modality_name(Modality m);

/// Per-sample condition set with explicit availability flags. A flag may
/// only be set when the corresponding field is present.
struct ConditionSet {
  Tensor image_tokens;                // [tokens, image width]
  std::vector<std::size_t> text_ids;  // tokenised caption
  Tensor rna;                         // [331] pathway scores
  Tensor z_cls;                       // [cls width]
  std::array<bool, kModalityCount> active{};

  static ConditionSet null() { return {}; }

  bool is_active(Modality m) const { return active[static_cast<std::size_t>(m)]; }
  bool present(Modality m) const;
  void set_image(Tensor tokens);
  void set_text(std::vector<std::size_t> ids);
  void set_rna(Tensor scores);
  void set_cls(Tensor embedding);
  /// Clears both flag and payload.
  void drop(Modality m);
  std::size_t active_count() const;
  /// Throws if an active flag has no payload or the RNA vector is not 331 long.
  void validate() const;
};

using ConditionBatch = std::vector<ConditionSet>;

ConditionBatch null_conditions(std::size_t batch);

}  // namespace mupad
