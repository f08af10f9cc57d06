#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mupad {

/// Fixed word-level vocabulary for template captions. Id 0 is <unk>.
class TextVocab {
 public:
  static constexpr std::size_t kUnk = 0;

  /// The built-in 32-word vocabulary.
  TextVocab();
  explicit TextVocab(std::vector<std::string> words);

  /// Whitespace tokenisation, case-folded; unknown words map to <unk>.
  std::vector<std::size_t> tokenize(std::string_view caption) const;
  std::string detokenize(const std::vector<std::size_t>& ids) const;
  std::size_t id(std::string_view word) const;
  const std::string& word(std::size_t id) const;
  bool contains(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  /// One line per entry: id, tab, word.
  void save(const std::filesystem::path& path) const;
  static TextVocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mupad
