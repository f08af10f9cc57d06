#include "mupad/checkpoint.hpp"

#include <sstream>

#include "mupad/io.hpp"

namespace mupad {

namespace {

constexpr std::string_view kMagic = "MUPD1";
constexpr std::size_t kDigestChars = 64;
constexpr std::uint64_t kMaxEntries = 1u << 20;

void write_named(std::ostream& out, const NamedTensors& v) {
  io::write_u64(out, v.size());
  for (const auto& [name, t] : v) {
    io::write_string(out, name);
    io::write_tensor(out, t);
  }
}

std::uint64_t read_count(std::istream& in, const char* what) {
  const std::uint64_t n = io::read_u64(in);
  if (n > kMaxEntries) throw io::FormatError(std::string("checkpoint: implausible ") + what + " count");
  return n;
}

NamedTensors read_named(std::istream& in, const char* what) {
  NamedTensors v(read_count(in, what));
  for (auto& [name, t] : v) {
    name = io::read_string(in);
    t = io::read_tensor(in);
  }
  return v;
}

Tensor moment_tensor(const std::vector<double>& values, const Shape& shape) { return Tensor(shape, values); }

}  // namespace

std::string Checkpoint::encode() const {
  std::ostringstream out;
  out.write(kMagic.data(), kMagic.size());
  io::write_u32(out, kVersion);
  io::write_string(out, config.to_ini());
  io::write_u64(out, step);
  write_named(out, model);
  write_named(out, aligner);

  const auto& h = optimizer.hyper;
  for (double x : {h.lr, h.beta1, h.beta2, h.eps, h.weight_decay}) io::write_f64(out, x);
  io::write_u64(out, optimizer.step);
  const std::size_t n = model.size() + aligner.size();
  if (optimizer.m.size() != n || optimizer.v.size() != n) throw ShapeError("checkpoint: optimizer state count mismatch");
  io::write_u64(out, n);
  for (std::size_t i = 0; i < n; ++i) {
    const Shape& shape = i < model.size() ? model[i].second.shape() : aligner[i - model.size()].second.shape();
    io::write_tensor(out, moment_tensor(optimizer.m[i], shape));
    io::write_tensor(out, moment_tensor(optimizer.v[i], shape));
  }

  io::write_f64(out, ema.decay);
  io::write_u64(out, ema.shadow.size());
  for (const auto& t : ema.shadow) io::write_tensor(out, t);

  std::string bytes = out.str();
  bytes += io::sha256_hex(bytes);
  return bytes;
}

Checkpoint Checkpoint::decode(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + kDigestChars || bytes.substr(0, kMagic.size()) != kMagic) {
    throw io::FormatError("checkpoint: bad magic (expected MUPD1)");
  }
  const auto body = bytes.substr(0, bytes.size() - kDigestChars);
  if (io::sha256_hex(body) != bytes.substr(body.size())) {
    throw io::FormatError("checkpoint: digest mismatch (file truncated or corrupt)");
  }

  std::istringstream in{std::string(body)};
  in.seekg(static_cast<std::streamoff>(kMagic.size()));
  const std::uint32_t version = io::read_u32(in);
  if (version != kVersion) throw io::FormatError("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint c;
  try {
    c.config = RunConfig::from_ini(io::read_string(in));
  } catch (const io::FormatError&) {
    throw;
  } catch (const Error& e) {
    throw io::FormatError(std::string("checkpoint: ") + e.what());
  }
  c.step = io::read_u64(in);
  c.model = read_named(in, "model parameter");
  c.aligner = read_named(in, "aligner parameter");

  auto& h = c.optimizer.hyper;
  for (double* x : {&h.lr, &h.beta1, &h.beta2, &h.eps, &h.weight_decay}) *x = io::read_f64(in);
  c.optimizer.step = io::read_u64(in);
  const std::uint64_t n = read_count(in, "optimizer moment");
  if (n != c.model.size() + c.aligner.size()) throw io::FormatError("checkpoint: optimizer state count mismatch");
  for (std::uint64_t i = 0; i < n; ++i) {
    const Shape& shape = i < c.model.size() ? c.model[i].second.shape() : c.aligner[i - c.model.size()].second.shape();
    Tensor m = io::read_tensor(in), v = io::read_tensor(in);
    if (m.shape() != shape || v.shape() != shape) throw io::FormatError("checkpoint: optimizer moment shape mismatch");
    c.optimizer.m.emplace_back(m.data().begin(), m.data().end());
    c.optimizer.v.emplace_back(v.data().begin(), v.data().end());
  }

  c.ema.decay = io::read_f64(in);
  const std::uint64_t ne = read_count(in, "EMA tensor");
  if (ne != c.model.size()) throw io::FormatError("checkpoint: EMA count mismatch");
  for (std::uint64_t i = 0; i < ne; ++i) {
    Tensor t = io::read_tensor(in);
    if (t.shape() != c.model[i].second.shape()) throw io::FormatError("checkpoint: EMA shape mismatch");
    c.ema.shadow.push_back(t);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw io::FormatError("checkpoint: trailing bytes");
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const { io::write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

NamedTensors named_copy(const ParameterSet& params) {
  NamedTensors out;
  for (const auto& [name, t] : params.entries()) {
    Tensor c = t.clone();
    c.set_requires_grad(false);
    out.emplace_back(name, c);
  }
  return out;
}

void restore(ParameterSet& params, const NamedTensors& values, const std::string& what) {
  const auto& entries = params.entries();
  if (entries.size() != values.size()) {
    throw io::FormatError(what + ": expected " + std::to_string(entries.size()) + " tensors, found " +
                          std::to_string(values.size()));
  }
  std::vector<Tensor> v;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (entries[i].first != values[i].first) {
      throw io::FormatError(what + ": expected tensor '" + entries[i].first + "', found '" + values[i].first + "'");
    }
    if (entries[i].second.shape() != values[i].second.shape()) {
      throw io::FormatError(what + ": shape header mismatch for '" + values[i].first + "': " +
                            shape_str(values[i].second.shape()) + " vs " + shape_str(entries[i].second.shape()));
    }
    v.push_back(values[i].second);
  }
  params.assign(v);
}

}  // namespace mupad
