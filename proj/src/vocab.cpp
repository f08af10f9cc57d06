#include "mupad/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "mupad/tensor.hpp"

namespace mupad {

namespace {

std::vector<std::string> builtin_words() {
  return {"<unk>",  "dense",  "moderate", "sparse", "cellularity", "large",   "medium", "small",
          "nuclei", "purple", "mauve",    "pink",   "stain",       "clean",   "frozen", "tissue",
          "he",     "marker", "group",    "g0",     "g1",          "g2",      "g3",     "g4",
          "g5",     "mask",   "boundary", "gradient", "dots",      "section", "ffpe",   "ff"};
}

std::string fold(std::string_view w) {
  std::string s(w);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

TextVocab::TextVocab() : TextVocab(builtin_words()) {}

TextVocab::TextVocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.empty() || words_[0] != "<unk>") throw Error("vocabulary must start with <unk>");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], i).second) throw Error("duplicate vocabulary word: " + words_[i]);
  }
}

std::vector<std::size_t> TextVocab::tokenize(std::string_view caption) const {
  std::vector<std::size_t> ids;
  std::istringstream in{std::string(caption)};
  std::string w;
  while (in >> w) ids.push_back(id(w));
  return ids;
}

std::string TextVocab::detokenize(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

std::size_t TextVocab::id(std::string_view w) const {
  auto it = index_.find(fold(w));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& TextVocab::word(std::size_t i) const {
  if (i >= words_.size()) throw Error("token id out of vocabulary: " + std::to_string(i));
  return words_[i];
}

bool TextVocab::contains(std::string_view w) const { return index_.count(fold(w)) > 0; }

void TextVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t i = 0; i < words_.size(); ++i) out << i << '\t' << words_[i] << '\n';
}

TextVocab TextVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("malformed vocabulary line: " + line);
    if (std::stoul(line.substr(0, tab)) != words.size()) throw Error("vocabulary ids must be consecutive");
    words.push_back(line.substr(tab + 1));
  }
  return TextVocab(std::move(words));
}

}  // namespace mupad
