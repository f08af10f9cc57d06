#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mupad {

inline constexpr std::size_t kGenePanelSize = 512;

struct GeneSet {
  std::string name;
  std::vector<std::size_t> genes;
};

/// The synthetic gene panel's pathway definitions.
class GeneSetTable {
 public:
  GeneSetTable(std::vector<GeneSet> sets, std::size_t gene_count);

  /// 331 sets of 1-8 distinct genes drawn from the 512-gene panel.
  static GeneSetTable generate(std::uint64_t seed = 20240331);
  /// One set per line: name, tab, comma-separated gene indices.
  static GeneSetTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  std::string to_text() const;

  const std::vector<GeneSet>& sets() const { return sets_; }
  std::size_t size() const { return sets_.size(); }
  std::size_t gene_count() const { return gene_count_; }

 private:
  std::vector<GeneSet> sets_;
  std::size_t gene_count_;
};

/// Transcripts per million. Counts are divided by gene length, genes in
/// `excluded` are zeroed before normalisation, and the rest scaled to 1e6.
std::vector<double> rna_preprocess(const std::vector<double>& counts, const std::vector<double>& lengths,
                                   const std::vector<std::size_t>& excluded = {});

/// Per set: mean over members of the z-scored log1p(TPM), z-scored across
/// the sample's genes. A zero-variance profile scores 0 everywhere.
std::vector<double> pathway_scores(const std::vector<double>& tpm, const GeneSetTable& table);

}  // namespace mupad
