#include "mupad/rna.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "mupad/condition.hpp"
#include "mupad/tensor.hpp"

namespace mupad {

GeneSetTable::GeneSetTable(std::vector<GeneSet> sets, std::size_t gene_count)
    : sets_(std::move(sets)), gene_count_(gene_count) {
  if (sets_.size() != kPathwayCount) {
    throw Error("gene set table must hold " + std::to_string(kPathwayCount) + " sets, got " +
                std::to_string(sets_.size()));
  }
  for (const auto& s : sets_) {
    if (s.genes.empty()) throw Error("gene set '" + s.name + "' is empty");
    for (std::size_t g : s.genes) {
      if (g >= gene_count_) throw Error("gene set '" + s.name + "' references gene " + std::to_string(g));
    }
  }
}

GeneSetTable GeneSetTable::generate(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> size_dist(1, 8), gene_dist(0, kGenePanelSize - 1);
  std::vector<GeneSet> sets;
  for (std::size_t i = 0; i < kPathwayCount; ++i) {
    GeneSet s;
    s.name = "PW" + std::string(i < 10 ? "00" : i < 100 ? "0" : "") + std::to_string(i);
    const std::size_t n = size_dist(rng);
    while (s.genes.size() < n) {
      const std::size_t g = gene_dist(rng);
      if (std::find(s.genes.begin(), s.genes.end(), g) == s.genes.end()) s.genes.push_back(g);
    }
    std::sort(s.genes.begin(), s.genes.end());
    sets.push_back(std::move(s));
  }
  return GeneSetTable(std::move(sets), kGenePanelSize);
}

std::string GeneSetTable::to_text() const {
  std::ostringstream os;
  for (const auto& s : sets_) {
    os << s.name << '\t';
    for (std::size_t i = 0; i < s.genes.size(); ++i) os << (i ? "," : "") << s.genes[i];
    os << '\n';
  }
  return os.str();
}

void GeneSetTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_text();
}

GeneSetTable GeneSetTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<GeneSet> sets;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("malformed gene set line: " + line);
    GeneSet s;
    s.name = line.substr(0, tab);
    std::istringstream genes(line.substr(tab + 1));
    std::string tok;
    while (std::getline(genes, tok, ',')) s.genes.push_back(std::stoul(tok));
    sets.push_back(std::move(s));
  }
  return GeneSetTable(std::move(sets), kGenePanelSize);
}

std::vector<double> rna_preprocess(const std::vector<double>& counts, const std::vector<double>& lengths,
                                   const std::vector<std::size_t>& excluded) {
  if (counts.size() != lengths.size()) throw ShapeError("counts and gene lengths differ in size");
  std::vector<double> rate(counts.size(), 0.0);
  for (std::size_t g = 0; g < counts.size(); ++g) {
    if (!(counts[g] >= 0.0) || !std::isfinite(counts[g])) throw Error("counts must be finite and nonnegative");
    if (!(lengths[g] > 0.0)) throw Error("gene lengths must be positive");
    rate[g] = counts[g] / lengths[g];
  }
  for (std::size_t g : excluded) {
    if (g >= rate.size()) throw Error("excluded gene index out of range");
    rate[g] = 0.0;
  }
  double total = 0.0;
  for (double r : rate) total += r;
  if (total <= 0.0) throw Error("all-zero counts cannot be normalised to TPM");
  for (double& r : rate) r = r / total * 1e6;
  return rate;
}

std::vector<double> pathway_scores(const std::vector<double>& tpm, const GeneSetTable& table) {
  if (tpm.size() != table.gene_count()) throw ShapeError("TPM vector does not match the gene panel");
  const std::size_t n = tpm.size();
  std::vector<double> z(n);
  double mean = 0.0;
  for (std::size_t g = 0; g < n; ++g) {
    z[g] = std::log1p(tpm[g]);
    mean += z[g];
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  std::vector<double> scores(table.size(), 0.0);
  // Rounding in the mean leaves a tiny variance for constant profiles.
  if (var <= 1e-24 * std::max(1.0, mean * mean)) return scores;
  const double sd = std::sqrt(var);
  for (double& v : z) v = (v - mean) / sd;
  for (std::size_t s = 0; s < table.size(); ++s) {
    const auto& genes = table.sets()[s].genes;
    double acc = 0.0;
    for (std::size_t g : genes) acc += z[g];
    scores[s] = acc / static_cast<double>(genes.size());
  }
  return scores;
}

}  // namespace mupad
