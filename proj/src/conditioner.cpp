#include "mupad/conditioner.hpp"

namespace mupad {

Conditioner::Conditioner() : encoder_(make_condition_encoder()) {}

ConditionSet Conditioner::from_image(const Tensor& image) const {
  auto e = encoder_.encode(image);
  ConditionSet c;
  c.set_image(e.tokens);
  c.set_cls(e.cls);
  return c;
}

ConditionSet Conditioner::from_text(const std::string& caption) const {
  auto ids = vocab_.tokenize(caption);
  if (ids.empty()) throw Error("caption '" + caption + "' has no words");
  ConditionSet c;
  c.set_text(std::move(ids));
  return c;
}

ConditionSet Conditioner::from_rna(const Tensor& pathway) const {
  ConditionSet c;
  c.set_rna(pathway);
  return c;
}

ConditionSet Conditioner::full(const synth::Sample& s) const {
  return merge(merge(from_image(s.image), from_text(s.caption)), from_rna(s.pathway));
}

Tensor Conditioner::cls_of(const Tensor& image) const { return encoder_.encode(image).cls; }

ConditionSet merge(const ConditionSet& a, const ConditionSet& b) {
  ConditionSet out = a;
  if (b.is_active(Modality::image)) out.set_image(b.image_tokens);
  if (b.is_active(Modality::text)) out.set_text(b.text_ids);
  if (b.is_active(Modality::rna)) out.set_rna(b.rna);
  if (b.is_active(Modality::cls)) out.set_cls(b.z_cls);
  return out;
}

}  // namespace mupad
