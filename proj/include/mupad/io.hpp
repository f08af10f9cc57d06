#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "mupad/tensor.hpp"

namespace mupad::io {

/// Raised for truncated, mislabelled or otherwise unreadable files.
struct FormatError : Error {
  using Error::Error;
};

/// Tensor blob: u32 rank, rank x u64 dims, numel x f64, all little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
/// u32 length prefix followed by raw bytes.
void write_string(std::ostream& out, std::string_view s);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
std::string read_string(std::istream& in);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);
/// Digest of the blob encoding of `tensors` in order.
std::string tensor_digest(const std::vector<Tensor>& tensors);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename.
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// 8-bit binary PPM (P6). Images are [3,H,W] in [0,1]; values are clamped
/// and rounded to the nearest of 256 levels.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
std::string encode_ppm(const Tensor& image);
Tensor decode_ppm(std::string_view bytes);

}  // namespace mupad::io
