#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "mupad/condition.hpp"
#include "mupad/encoder.hpp"
#include "mupad/imaging.hpp"
#include "mupad/io.hpp"
#include "mupad/rna.hpp"
#include "mupad/vocab.hpp"

using namespace mupad;
namespace fs = std::filesystem;

namespace {

Tensor random_image(Rng& rng, std::size_t h = 32, std::size_t w = 32) { return Tensor::uniform({3, h, w}, rng, 0.0, 1.0); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mupad_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("condition encoder is frozen, deterministic and sensitive") {
  StubEncoder enc = make_condition_encoder();
  Rng rng(1);
  Tensor img = random_image(rng);
  auto a = enc.encode(img), b = make_condition_encoder().encode(img);
  CHECK(a.tokens.shape() == Shape{16, 32});
  CHECK(a.cls.shape() == Shape{32});
  CHECK(max_abs_diff(a.tokens, b.tokens) == 0.0);
  CHECK(max_abs_diff(a.cls, b.cls) == 0.0);

  Tensor moved = img.clone();
  moved.mutable_data()[5 * 32 + 7] += 0.25;
  CHECK(max_abs_diff(enc.encode(moved).tokens, a.tokens) > 0.0);

  auto z = enc.encode(Tensor({3, 32, 32}, 0.0));
  for (double v : z.tokens.data()) CHECK(std::isfinite(v));
  double norm = 0.0;
  for (double v : z.cls.data()) norm += v * v;
  CHECK(norm > 0.0);

  // Pooled CLS is the spatial mean of the tokens.
  for (std::size_t j = 0; j < 32; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < 16; ++r) m += a.tokens[r * 32 + j] / 16.0;
    CHECK(a.cls[j] == doctest::Approx(m).epsilon(1e-14));
  }
  CHECK_THROWS_AS(enc.encode(Tensor({4, 32, 32})), ShapeError);
}

TEST_CASE("teacher grid, frozen digest and independence from the condition encoder") {
  StubEncoder teacher = make_teacher_encoder(), cond = make_condition_encoder();
  Rng rng(2);
  Tensor imgs = Tensor::uniform({2, 3, 32, 32}, rng, 0.0, 1.0);
  const std::string before = teacher.weight_digest();
  Tensor grid = teacher.encode_grid(imgs);
  CHECK(teacher.stride() == 8);
  CHECK(grid.shape() == Shape{2 * (32 / 8) * (32 / 8), teacher.width()});
  CHECK(teacher.weight_digest() == before);
  CHECK(make_teacher_encoder().weight_digest() == before);
  CHECK(cond.weight_digest() != before);
  CHECK(max_abs_diff(cond.encode_grid(imgs), grid) > 0.1);
}

TEST_CASE("vocabulary tokenisation") {
  TextVocab v;
  CHECK(v.size() == 32);
  CHECK(v.tokenize("").empty());
  CHECK(v.tokenize("   ").empty());
  auto ids = v.tokenize("dense cellularity tissue");
  REQUIRE(ids.size() == 3);
  CHECK(ids == std::vector<std::size_t>{v.id("dense"), v.id("cellularity"), v.id("tissue")});
  for (std::size_t id : ids) CHECK(id != TextVocab::kUnk);
  CHECK(v.tokenize("Dense  banana")[1] == TextVocab::kUnk);
  CHECK(v.tokenize("DENSE")[0] == v.id("dense"));
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.word(i)) == i);
  CHECK_THROWS_AS(v.word(99), Error);

  auto dir = temp_dir("vocab");
  v.save(dir / "vocab.tsv");
  CHECK(TextVocab::load(dir / "vocab.tsv").words() == v.words());

  ConditionSet cs;
  cs.set_text(v.tokenize(""));
  CHECK_FALSE(cs.is_active(Modality::text));
}

TEST_CASE("TPM normalisation") {
  auto single = rna_preprocess({7.0}, {3.0});
  CHECK(single[0] == doctest::Approx(1e6));
  auto eq = rna_preprocess(std::vector<double>(8, 5.0), std::vector<double>(8, 2.0));
  for (double x : eq) CHECK(x == doctest::Approx(1e6 / 8));

  Rng rng(3);
  std::uniform_real_distribution<double> cnt(0.0, 100.0), len(0.5, 5.0);
  std::vector<double> c(50), l(50);
  for (std::size_t i = 0; i < 50; ++i) c[i] = cnt(rng), l[i] = len(rng);
  auto tpm = rna_preprocess(c, l, {4, 9});
  double denom = 0.0;
  for (std::size_t i = 0; i < 50; ++i)
    if (i != 4 && i != 9) denom += c[i] / l[i];
  for (std::size_t i = 0; i < 50; ++i) {
    const double expect = (i == 4 || i == 9) ? 0.0 : c[i] / l[i] / denom * 1e6;
    CHECK(tpm[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(std::accumulate(tpm.begin(), tpm.end(), 0.0) == doctest::Approx(1e6).epsilon(1e-12));
  CHECK_THROWS_AS(rna_preprocess({0.0, 0.0}, {1.0, 1.0}), Error);
  CHECK_THROWS_AS(rna_preprocess({-1.0}, {1.0}), Error);
}

TEST_CASE("gene set table") {
  auto table = GeneSetTable::generate();
  CHECK(table.size() == kPathwayCount);
  for (const auto& s : table.sets()) {
    CHECK(s.genes.size() >= 1);
    CHECK(s.genes.size() <= 8);
  }
  CHECK(GeneSetTable::generate().to_text() == table.to_text());

  const fs::path shipped = fs::path(MUPAD_DATA_DIR) / "gene_sets.tsv";
  REQUIRE(fs::exists(shipped));
  CHECK(io::read_file(shipped) == table.to_text());
  CHECK(GeneSetTable::load(shipped).to_text() == table.to_text());

  std::vector<GeneSet> bad(kPathwayCount, GeneSet{"x", {1}});
  bad[3].genes.clear();
  CHECK_THROWS_AS(GeneSetTable(bad, kGenePanelSize), Error);
  CHECK_THROWS_AS(GeneSetTable(std::vector<GeneSet>(5, GeneSet{"x", {1}}), kGenePanelSize), Error);
}

TEST_CASE("pathway scores") {
  auto table = GeneSetTable::generate();
  Rng rng(4);
  std::vector<double> tpm(kGenePanelSize);
  for (auto& x : tpm) x = std::exp(std::normal_distribution<double>(5.0, 2.0)(rng));
  auto scores = pathway_scores(tpm, table);
  REQUIRE(scores.size() == kPathwayCount);

  // Brute-force oracle.
  std::vector<double> lg(tpm.size());
  for (std::size_t g = 0; g < tpm.size(); ++g) lg[g] = std::log1p(tpm[g]);
  const double mean = std::accumulate(lg.begin(), lg.end(), 0.0) / lg.size();
  double var = 0.0;
  for (double v : lg) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / lg.size());
  for (std::size_t s = 0; s < table.size(); ++s) {
    double m = 0.0;
    for (std::size_t g : table.sets()[s].genes) m += (lg[g] - mean) / sd;
    m /= table.sets()[s].genes.size();
    CHECK(scores[s] == doctest::Approx(m).epsilon(1e-12));
    if (table.sets()[s].genes.size() == 1) {
      CHECK(scores[s] == doctest::Approx((lg[table.sets()[s].genes[0]] - mean) / sd).epsilon(1e-12));
    }
  }

  auto flat = pathway_scores(std::vector<double>(kGenePanelSize, 1e6 / kGenePanelSize), table);
  for (double s : flat) CHECK(s == 0.0);

  // Uniform TPM scaling shifts log1p only approximately (log1p(cx) != log1p(x) + log c);
  // the deviation is O(1/TPM) and vanishes as expression grows.
  std::vector<double> big = tpm, big2 = tpm;
  for (std::size_t g = 0; g < tpm.size(); ++g) big[g] = tpm[g] * 1e6, big2[g] = tpm[g] * 2e6;
  auto sa = pathway_scores(big, table), sb = pathway_scores(big2, table);
  double dev = 0.0;
  for (std::size_t s = 0; s < sa.size(); ++s) dev = std::max(dev, std::abs(sa[s] - sb[s]));
  MESSAGE("max score change under 2x TPM scaling at high expression: " << dev);
  CHECK(dev < 1e-6);
  CHECK_THROWS_AS(pathway_scores({1.0, 2.0}, table), ShapeError);
}

TEST_CASE("latent codec") {
  Rng rng(5);
  Tensor img = random_image(rng);
  Tensor z = latent_encode(img);
  CHECK(z.shape() == Shape{48, 8, 8});
  Tensor back = latent_decode(z);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(back[i] == img[i]);
  double n1 = 0.0, n2 = 0.0;
  for (double v : img.data()) n1 += v * v;
  for (double v : z.data()) n2 += v * v;
  CHECK(std::sqrt(n1) == doctest::Approx(std::sqrt(n2)).epsilon(1e-15));

  Tensor id = latent_encode(img, 1);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(id[i] == img[i]);

  const std::size_t f = 4;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) {
        const std::size_t ch = c * f * f + (i % f) * f + j % f;
        CHECK(z[(ch * 8 + i / f) * 8 + j / f] == img[(c * 32 + i) * 32 + j]);
      }

  Tensor batch = Tensor::uniform({2, 3, 32, 32}, rng, 0.0, 1.0);
  Tensor zb = latent_encode(batch);
  CHECK(zb.shape() == Shape{2, 48, 8, 8});
  CHECK(max_abs_diff(latent_decode(zb), batch) == 0.0);
  CHECK_THROWS_AS(latent_encode(Tensor({3, 30, 32})), ShapeError);

  Tensor ms = to_model_space(img);
  CHECK(max_abs_diff(from_model_space(ms), img) < 1e-15);
}

TEST_CASE("HED stain augmentation") {
  auto m = StainMatrix::ruifrok();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += m.rgb_from_hed[r][k] * m.hed_from_rgb[k][c];
      CHECK(std::abs(s - (r == c ? 1.0 : 0.0)) < 1e-10);
    }

  Rng rng(6);
  Tensor img = Tensor::uniform({3, 16, 16}, rng, 0.05, 1.0);
  CHECK(max_abs_diff(hed_augment(img, {}), img) < 1e-6);

  // A pure-hematoxylin pixel and a pure-eosin pixel.
  Tensor px({3, 1, 2});
  for (std::size_t c = 0; c < 3; ++c) {
    px.mutable_data()[c * 2 + 0] = std::exp(-0.8 * m.rgb_from_hed[0][c]);
    px.mutable_data()[c * 2 + 1] = std::exp(-0.8 * m.rgb_from_hed[1][c]);
  }
  HedPerturbation hp;
  hp.scale[0] = 1.5;
  Tensor out = hed_augment(px, hp);
  double dh = 0.0, de = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    dh += std::abs(out[c * 2] - px[c * 2]);
    de += std::abs(out[c * 2 + 1] - px[c * 2 + 1]);
  }
  CHECK(dh > 10 * de);

  HedPerturbation wild;
  wild.scale = {3.0, 0.1, 2.0};
  wild.shift = {0.5, -0.5, 0.2};
  for (double v : hed_augment(img, wild).data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("multiplex channel grouping") {
  Rng rng(7);
  auto check_groups = [&](std::size_t K, std::vector<std::array<std::size_t, 3>> expect) {
    Tensor mif = Tensor::randn({K, 4, 4}, rng);
    auto groups = group_channels(mif);
    REQUIRE(groups.size() == expect.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
      CHECK(group_members(g, K) == expect[g]);
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t p = 0; p < 16; ++p) CHECK(groups[g][s * 16 + p] == mif[expect[g][s] * 16 + p]);
    }
    CHECK(max_abs_diff(ungroup_channels(groups, K), mif) == 0.0);
  };
  check_groups(3, {{0, 1, 2}});
  check_groups(4, {{0, 1, 2}, {3, 3, 3}});
  check_groups(16, {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {9, 10, 11}, {12, 13, 14}, {15, 15, 15}});
  check_groups(1, {{0, 0, 0}});
  CHECK_THROWS_AS(group_members(2, 4), ShapeError);
}

TEST_CASE("PPM and tensor blob round trips") {
  Rng rng(8);
  Tensor img({3, 5, 7});
  for (auto& v : img.mutable_data()) v = static_cast<double>(std::uniform_int_distribution<int>(0, 255)(rng)) / 255.0;
  const std::string bytes = io::encode_ppm(img);
  CHECK(bytes.substr(0, 2) == "P6");
  Tensor back = io::decode_ppm(bytes);
  CHECK(max_abs_diff(back, img) == 0.0);
  CHECK(io::encode_ppm(back) == bytes);
  CHECK_THROWS_AS(io::decode_ppm(bytes.substr(0, bytes.size() - 1)), io::FormatError);
  CHECK_THROWS_AS(io::decode_ppm("P3\n1 1\n255\n000"), io::FormatError);

  Tensor t = Tensor::randn({2, 3, 4}, rng);
  std::stringstream ss;
  io::write_tensor(ss, t);
  Tensor r = io::read_tensor(ss);
  CHECK(r.shape() == t.shape());
  CHECK(max_abs_diff(r, t) == 0.0);
  std::stringstream cut(ss.str().substr(0, 20));
  CHECK_THROWS_AS(io::read_tensor(cut), io::FormatError);
  CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
