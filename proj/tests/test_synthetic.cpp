#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "mupad/condition.hpp"
#include "mupad/dataset.hpp"
#include "mupad/io.hpp"
#include "mupad/synthetic.hpp"
#include "mupad/vocab.hpp"

using namespace mupad;
using namespace mupad::synth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mupad_test_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::string> tree_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::sha256_file(e.path());
  return out;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Factors with(double density, double size) {
  Factors f;
  f.density = density;
  f.size = size;
  return f;
}

}  // namespace

TEST_CASE("nucleus count and radius formulas") {
  CHECK(nucleus_count(0.0) == 3);
  CHECK(nucleus_count(1.0) == 15);
  CHECK(nucleus_count(0.5) == 9);
  CHECK(nucleus_radius(0.0) == 1.0);
  CHECK(nucleus_radius(1.0) == 3.0);
  // Separated placements render as that many mask components.
  for (std::uint64_t id = 0; id < 20; ++id) {
    const auto s = render(with(0.0, 0.3), Domain::clean, 3, id);
    Tensor mask_rgb({3, kImageSize, kImageSize});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < kImageSize * kImageSize; ++k)
        mask_rgb.mutable_data()[c * kImageSize * kImageSize + k] = 1.0 - s.markers[k];
    CHECK(dark_components(mask_rgb, 0.5) == 3);
  }
}

TEST_CASE("oracle density") {
  CHECK(oracle_density(Tensor({3, 32, 32}, 1.0)) == 0.0);
  CHECK(oracle_density(Tensor({3, 32, 32}, 0.0)) == 0.0);  // one component
  std::size_t worst_miss = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Factors f = draw_factors(seed, 0);
    f.density = 0.5;
    f.size = 0.5;
    const auto s = render(f, Domain::clean, seed, 0);
    const double est = oracle_density(s.image);
    CHECK(std::abs(est - 0.5) <= 1.0 / 12.0 + 1e-12);
    worst_miss = std::max(worst_miss, static_cast<std::size_t>(std::lround(std::abs(est - 0.5) * 12)));
  }
  MESSAGE("largest miscount at density 0.5: " << worst_miss);

  // Mean estimate over seeds is nondecreasing along a density sweep.
  double last = -1.0;
  for (int k = 0; k <= 12; ++k) {
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Factors f = draw_factors(seed, 1);
      f.density = k / 12.0;
      f.size = 0.5;
      acc += oracle_density(render(f, Domain::clean, seed, 1).image);
    }
    CHECK(acc / 20.0 >= last);
    last = acc / 20.0;
  }
}

TEST_CASE("sample contents") {
  TextVocab vocab;
  const Tensor& m = pathway_matrix();
  double resid_sq = 0.0;
  std::size_t resid_n = 0, dots = 0;
  double expected_dots = 0.0;
  for (std::uint64_t id = 0; id < 200; ++id) {
    const auto s = generate(11, id);
    s.factors.validate();
    CHECK(s.image.shape() == Shape{3, 32, 32});
    CHECK(s.markers.shape() == Shape{4, 32, 32});
    for (double v : s.image.data()) CHECK((v >= 0.0 && v <= 1.0));
    for (const auto& w : vocab.tokenize(s.caption)) CHECK(w != TextVocab::kUnk);
    const auto fv = s.factors.values();
    for (std::size_t p = 0; p < kPathwayCount; ++p) {
      double mu = 0.0;
      for (std::size_t k = 0; k < 8; ++k) mu += m[p * 8 + k] * fv[k];
      resid_sq += (s.pathway[p] - mu) * (s.pathway[p] - mu);
      ++resid_n;
    }
    for (std::size_t k = 0; k < 1024; ++k) {
      CHECK(s.markers[1024 + k] <= s.markers[k]);  // boundary inside mask
      dots += s.markers[3 * 1024 + k] > 0.5;
    }
    expected_dots += 1024 * 0.02 * (1.0 + s.factors.density);
    CHECK(s.markers[2 * 1024 + 31 * 32] == 1.0);
    CHECK(s.markers[2 * 1024 + 5] == 0.0);
  }
  const double resid_sd = std::sqrt(resid_sq / resid_n);
  MESSAGE("pathway residual sd " << resid_sd << ", dots " << dots << " vs expected " << expected_dots);
  CHECK(resid_sd == doctest::Approx(0.1).epsilon(0.02));
  CHECK(std::abs(dots - expected_dots) < 4.0 * std::sqrt(expected_dots));
}

TEST_CASE("frozen domain adds streaks to the same content") {
  const Factors f = draw_factors(5, 7);
  const auto clean = render(f, Domain::clean, 5, 7);
  const auto frozen = render(f, Domain::frozen, 5, 7);
  CHECK(same(clean.markers, frozen.markers));
  CHECK(same(clean.pathway, frozen.pathway));
  CHECK(clean.caption.find("clean") != std::string::npos);
  CHECK(frozen.caption.find("frozen") != std::string::npos);
  // Column-wise mean shift: four columns darker by about 0.3 than the rest.
  std::vector<double> shift(32, 0.0);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) shift[j] += (frozen.image[i * 32 + j] - clean.image[i * 32 + j]) / 32.0;
  std::vector<double> sorted = shift;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted[4] - sorted[3] > 0.15);
  CHECK(std::abs(sorted[31] - sorted[4]) < 0.1);
}

TEST_CASE("regeneration is byte-identical and manifest integrity holds") {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  const auto m = gen_dataset(12, 42, a);
  gen_dataset(12, 42, b);
  const auto ta = tree_digest(a), tb = tree_digest(b);
  CHECK(ta.size() == 12 + 3);
  CHECK(ta == tb);

  Manifest loaded;
  const auto samples = load_dataset(a, &loaded);
  CHECK(loaded.to_text() == m.to_text());
  REQUIRE(samples.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto ref = generate(42, i);
    CHECK(same(samples[i].image, ref.image));
    CHECK(same(samples[i].markers, ref.markers));
    CHECK(same(samples[i].pathway, ref.pathway));
    CHECK(samples[i].caption == ref.caption);
    CHECK(fs::exists(a / m.entries[i].file));
  }

  // Tampering with one sample breaks its digest.
  std::string bytes = io::read_file(a / m.entries[3].file);
  bytes[100] ^= 1;
  io::write_file(a / m.entries[3].file, bytes);
  CHECK_THROWS_AS(load_dataset(a), io::FormatError);
  CHECK_THROWS_AS(decode_sample(bytes.substr(0, 50)), io::FormatError);
  CHECK_THROWS_AS(Manifest::parse("id\tfile\n"), io::FormatError);
  fs::remove_all(a);
  fs::remove_all(b);
}
