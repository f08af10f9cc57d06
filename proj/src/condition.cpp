#include "mupad/condition.hpp"

#include <string>

namespace mupad {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::text: return "text";
    case Modality::rna: return "rna";
    case Modality::cls: return "cls";
  }
  return "?";
}

bool ConditionSet::present(Modality m) const {
  switch (m) {
    case Modality::image: return image_tokens.defined() && image_tokens.numel() > 0;
    case Modality::text: return !text_ids.empty();
    case Modality::rna: return rna.defined();
    case Modality::cls: return z_cls.defined();
  }
  return false;
}

void ConditionSet::set_image(Tensor tokens) {
  image_tokens = std::move(tokens);
  active[0] = true;
}

void ConditionSet::set_text(std::vector<std::size_t> ids) {
  text_ids = std::move(ids);
  active[1] = !text_ids.empty();
}

void ConditionSet::set_rna(Tensor scores) {
  rna = std::move(scores);
  active[2] = true;
}

void ConditionSet::set_cls(Tensor embedding) {
  z_cls = std::move(embedding);
  active[3] = true;
}

void ConditionSet::drop(Modality m) {
  active[static_cast<std::size_t>(m)] = false;
  switch (m) {
    case Modality::image: image_tokens = {}; break;
    case Modality::text: text_ids.clear(); break;
    case Modality::rna: rna = {}; break;
    case Modality::cls: z_cls = {}; break;
  }
}

std::size_t ConditionSet::active_count() const {
  std::size_t n = 0;
  for (bool a : active) n += a;
  return n;
}

void ConditionSet::validate() const {
  for (std::size_t i = 0; i < kModalityCount; ++i) {
    const auto m = static_cast<Modality>(i);
    if (active[i] && !present(m)) {
      throw Error("condition '" + std::string(modality_name(m)) + "' flagged active but has no embedding");
    }
  }
  if (is_active(Modality::rna) && rna.numel() != kPathwayCount) {
    throw ShapeError("rna condition must have " + std::to_string(kPathwayCount) + " pathway scores");
  }
  if (is_active(Modality::image) && image_tokens.rank() != 2) throw ShapeError("image tokens must be rank 2");
}

ConditionBatch null_conditions(std::size_t batch) { return ConditionBatch(batch); }

}  // namespace mupad
