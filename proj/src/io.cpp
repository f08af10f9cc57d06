#include "mupad/io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mupad::io {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

namespace {

void need(std::istream& in, const char* what) {
  if (!in) throw FormatError(std::string("truncated or unreadable data while reading ") + what);
}

template <class T>
void put(std::ostream& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  char buf[sizeof(T)];
  in.read(buf, sizeof(T));
  need(in, what);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint64_t kMaxElements = 1ULL << 32;

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_f64(std::ostream& out, double v) { put(out, v); }
void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in, "u32"); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in, "u64"); }
double read_f64(std::istream& in) { return get<double>(in, "f64"); }
std::string read_string(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  if (n > (1u << 24)) throw FormatError("string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  in.read(s.data(), n);
  need(in, "string");
  return s;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_u64(out, d);
  auto d = t.data();
  out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& in) {
  const std::uint32_t rank = read_u32(in);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " is implausible");
  Shape shape(rank);
  std::uint64_t n = 1;
  for (auto& d : shape) {
    d = read_u64(in);
    n *= d;
    if (n > kMaxElements) throw FormatError("tensor header describes too many elements");
  }
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  need(in, "tensor data");
  return Tensor(std::move(shape), std::move(data));
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string tensor_digest(const std::vector<Tensor>& tensors) {
  std::ostringstream os;
  for (const auto& t : tensors) write_tensor(os, t);
  return sha256_hex(os.str());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("PPM images must be [3,H,W]");
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + 3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * H + y) * W + x], 0.0, 1.0);
        out[header + (y * W + x) * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
  return out;
}

Tensor decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_ws();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw FormatError("PPM header number too large");
    }
    if (digits == 0) throw FormatError("malformed PPM header");
    return v;
  };
  if (bytes.substr(0, 2) != "P6") throw FormatError("not a binary PPM (P6) file");
  pos = 2;
  const std::size_t W = number(), H = number(), maxval = number();
  if (maxval != 255) throw FormatError("only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("malformed PPM header");
  }
  ++pos;
  if (bytes.size() - pos < 3 * H * W) throw FormatError("truncated PPM pixel data");
  Tensor img({3, H, W});
  auto o = img.mutable_data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        o[(c * H + y) * W + x] = static_cast<unsigned char>(bytes[pos + (y * W + x) * 3 + c]) / 255.0;
      }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_ppm(image)); }

Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

}  // namespace mupad::io
