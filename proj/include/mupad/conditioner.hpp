#pragma once

#include <string>

#include "mupad/condition.hpp"
#include "mupad/encoder.hpp"
#include "mupad/synthetic.hpp"
#include "mupad/vocab.hpp"

namespace mupad {

/// Builds condition sets from raw inputs with the frozen condition encoder
/// and the caption vocabulary.
class Conditioner {
 public:
  Conditioner();

  /// Image tokens plus the pooled CLS as z_cls.
  ConditionSet from_image(const Tensor& image) const;
  /// Throws when the caption has no words.
  ConditionSet from_text(const std::string& caption) const;
  ConditionSet from_rna(const Tensor& pathway) const;
  /// Every modality of a sample.
  ConditionSet full(const synth::Sample& s) const;

  Tensor cls_of(const Tensor& image) const;
  const StubEncoder& encoder() const { return encoder_; }
  const TextVocab& vocab() const { return vocab_; }

 private:
  StubEncoder encoder_;
  TextVocab vocab_;
};

/// Union of two condition sets; `b` wins where both are active.
ConditionSet merge(const ConditionSet& a, const ConditionSet& b);

}  // namespace mupad
