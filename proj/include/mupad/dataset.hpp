#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mupad/synthetic.hpp"

namespace mupad {

struct ManifestEntry {
  std::uint64_t id = 0;
  std::string file;  // relative to the dataset directory
  synth::Factors factors;
  std::string caption;
  synth::Domain domain = synth::Domain::clean;
  std::string sha256;
};

struct Manifest {
  std::uint64_t seed = 0;
  double frozen_fraction = 0.5;
  std::vector<ManifestEntry> entries;

  std::string to_text() const;
  static Manifest parse(const std::string& text);
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// Sample file: "MUPS1", u64 id, u32 domain, then image, markers, pathway
/// and factor blobs.
std::string encode_sample(const synth::Sample& s);
synth::Sample decode_sample(const std::string& bytes);

/// Writes n samples, the manifest, gene_sets.tsv and vocab.tsv.
Manifest gen_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                     double frozen_fraction = 0.5);

/// Reads the manifest and every sample, verifying digests and that the
/// stored fields agree with the manifest.
std::vector<synth::Sample> load_dataset(const std::filesystem::path& dir, Manifest* manifest = nullptr);

/// In-memory equivalent of gen_dataset.
std::vector<synth::Sample> generate_samples(std::size_t n, std::uint64_t seed, double frozen_fraction = 0.5);

}  // namespace mupad
