#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mupad/config.hpp"
#include "mupad/optim.hpp"
#include "mupad/params.hpp"

namespace mupad {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Training state on disk. Layout (little-endian):
///   "MUPD1" u32 version
///   string config (INI text)
///   u64 step
///   u64 n, n x (string name, tensor)         denoiser parameters
///   u64 n, n x (string name, tensor)         alignment projector parameters
///   5 x f64 AdamW hyper (lr, beta1, beta2, eps, weight_decay), u64 AdamW step
///   u64 n, n x (tensor m, tensor v)          moments, shaped like the parameters
///   f64 EMA decay, u64 n, n x tensor         EMA shadow of the denoiser parameters
///   64 hex chars: SHA-256 of every preceding byte
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  RunConfig config;
  std::uint64_t step = 0;
  NamedTensors model;
  NamedTensors aligner;
  AdamWState optimizer;
  EmaState ema;

  std::string encode() const;
  /// Throws io::FormatError on bad magic, version, digest or truncation.
  static Checkpoint decode(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

NamedTensors named_copy(const ParameterSet& params);
/// Copies values into `params`. Names, order and shapes must match exactly;
/// a mismatch raises io::FormatError naming the first offending entry.
void restore(ParameterSet& params, const NamedTensors& values, const std::string& what);

}  // namespace mupad
