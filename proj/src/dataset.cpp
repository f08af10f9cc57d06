#include "mupad/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "mupad/condition.hpp"
#include "mupad/io.hpp"
#include "mupad/rna.hpp"
#include "mupad/vocab.hpp"

namespace mupad {

namespace {

constexpr char kSampleMagic[5] = {'M', 'U', 'P', 'S', '1'};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string sample_file(std::uint64_t id) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "samples/%06llu.bin", static_cast<unsigned long long>(id));
  return buf;
}

}  // namespace

std::string Manifest::to_text() const {
  std::ostringstream os;
  os << "# mupad-dataset\tseed=" << seed << "\tfrozen_fraction=" << fmt(frozen_fraction)
     << "\tn=" << entries.size() << '\n';
  os << "id\tfile\tfactors\tcaption\tdomain\tsha256\n";
  for (const auto& e : entries) {
    os << e.id << '\t' << e.file << '\t';
    const auto v = e.factors.values();
    for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "," : "") << fmt(v[k]);
    os << '\t' << e.caption << '\t' << synth::domain_name(e.domain) << '\t' << e.sha256 << '\n';
  }
  return os.str();
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# mupad-dataset", 0) != 0) {
    throw io::FormatError("manifest: missing header line");
  }
  std::size_t declared = 0;
  for (const auto& field : split(line, '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) continue;
    const auto key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "seed") m.seed = std::stoull(val);
    if (key == "frozen_fraction") m.frozen_fraction = std::stod(val);
    if (key == "n") declared = std::stoull(val);
  }
  if (!std::getline(in, line) || line != "id\tfile\tfactors\tcaption\tdomain\tsha256") {
    throw io::FormatError("manifest: missing column header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 6) throw io::FormatError("manifest: expected 6 columns in line: " + line);
    ManifestEntry e;
    e.id = std::stoull(cols[0]);
    e.file = cols[1];
    const auto fv = split(cols[2], ',');
    if (fv.size() != synth::kFactorCount) throw io::FormatError("manifest: expected 8 factors for id " + cols[0]);
    std::array<double, synth::kFactorCount> v;
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::stod(fv[k]);
    e.factors = synth::Factors::from_values(v);
    e.caption = cols[3];
    e.domain = synth::parse_domain(cols[4]);
    e.sha256 = cols[5];
    m.entries.push_back(std::move(e));
  }
  if (m.entries.size() != declared) throw io::FormatError("manifest: header declares a different sample count");
  return m;
}

std::string encode_sample(const synth::Sample& s) {
  std::ostringstream os(std::ios::binary);
  os.write(kSampleMagic, sizeof kSampleMagic);
  io::write_u64(os, s.id);
  io::write_u32(os, s.domain == synth::Domain::frozen ? 1 : 0);
  io::write_tensor(os, s.image);
  io::write_tensor(os, s.markers);
  io::write_tensor(os, s.pathway);
  const auto v = s.factors.values();
  io::write_tensor(os, Tensor({synth::kFactorCount}, std::vector<double>(v.begin(), v.end())));
  return os.str();
}

synth::Sample decode_sample(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[5];
  if (!in.read(magic, 5) || !std::equal(magic, magic + 5, kSampleMagic)) throw io::FormatError("sample: bad magic");
  synth::Sample s;
  s.id = io::read_u64(in);
  const auto dom = io::read_u32(in);
  if (dom > 1) throw io::FormatError("sample: bad domain code");
  s.domain = dom ? synth::Domain::frozen : synth::Domain::clean;
  s.image = io::read_tensor(in);
  s.markers = io::read_tensor(in);
  s.pathway = io::read_tensor(in);
  const Tensor f = io::read_tensor(in);
  if (s.image.shape() != Shape{3, synth::kImageSize, synth::kImageSize} ||
      s.markers.shape() != Shape{synth::kMarkerChannels, synth::kImageSize, synth::kImageSize} ||
      s.pathway.shape() != Shape{kPathwayCount} || f.shape() != Shape{synth::kFactorCount}) {
    throw io::FormatError("sample: unexpected tensor shapes");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw io::FormatError("sample: trailing bytes");
  std::array<double, synth::kFactorCount> v;
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = f[k];
  s.factors = synth::Factors::from_values(v);
  s.caption = synth::caption_for(s.factors, s.domain);
  return s;
}

std::vector<synth::Sample> generate_samples(std::size_t n, std::uint64_t seed, double frozen_fraction) {
  std::vector<synth::Sample> out;
  out.reserve(n);
  for (std::size_t id = 0; id < n; ++id) out.push_back(synth::generate(seed, id, frozen_fraction));
  return out;
}

Manifest gen_dataset(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                     double frozen_fraction) {
  if (n == 0) throw Error("gen_dataset: n must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "samples", ec);
  if (ec) throw Error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.seed = seed;
  m.frozen_fraction = frozen_fraction;
  for (std::size_t id = 0; id < n; ++id) {
    const auto s = synth::generate(seed, id, frozen_fraction);
    const std::string bytes = encode_sample(s);
    ManifestEntry e{s.id, sample_file(id), s.factors, s.caption, s.domain, io::sha256_hex(bytes)};
    io::write_file(out_dir / e.file, bytes);
    m.entries.push_back(std::move(e));
  }
  io::write_file(out_dir / kManifestName, m.to_text());
  io::write_file(out_dir / "gene_sets.tsv", GeneSetTable::generate().to_text());
  TextVocab().save(out_dir / "vocab.tsv");
  return m;
}

std::vector<synth::Sample> load_dataset(const std::filesystem::path& dir, Manifest* manifest) {
  const Manifest m = Manifest::parse(io::read_file(dir / kManifestName));
  std::vector<synth::Sample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    const std::string bytes = io::read_file(dir / e.file);
    if (io::sha256_hex(bytes) != e.sha256) throw io::FormatError("digest mismatch for " + e.file);
    auto s = decode_sample(bytes);
    if (s.id != e.id || s.domain != e.domain || s.caption != e.caption || s.factors.values() != e.factors.values()) {
      throw io::FormatError("sample " + e.file + " disagrees with the manifest");
    }
    out.push_back(std::move(s));
  }
  if (manifest) *manifest = m;
  return out;
}

}  // namespace mupad
